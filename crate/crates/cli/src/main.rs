use clap::{Parser, Subcommand};
use segmvs_core::io::{self, IoError};
use segmvs_core::segmentation::{fallback_segment, FallbackParams};
use segmvs_core::synth::{self, Preset};
use segmvs_core::{fuse, Ablation, Config, FuseParams, FuseView, Reconstruction};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Segmentation-guided PatchMatch multi-view stereo.
#[derive(Debug, Parser)]
#[command(name = "segmvs", version)]
struct Cli {
    /// Seed for every random choice (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Disable or swap one component.
    #[arg(long, global = true, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate depth maps into the scene's output directory.
    Estimate {
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Only write this view's map (all views are still estimated).
        #[arg(long)]
        view: Option<usize>,
    },
    /// Fuse the estimated depth maps into `fused.ply`.
    Fuse {
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render a synthetic scene with ground truth.
    Synth {
        preset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score estimated depth maps against ground-truth maps.
    Eval {
        scene: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Label every image with the built-in segmenter.
    Segment { scene: PathBuf },
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: segmvs_core::config::ConfigError| e.to_string())
}

type DataResult<T> = Result<T, Box<dyn std::error::Error>>;

/// Config file next to the manifest, picked up when no `--config` is given.
const SCENE_CONFIG: &str = "segmvs.cfg";

fn load_config(cli: &Cli, scene: &Path, explicit: Option<&Path>) -> DataResult<Config> {
    let implicit = scene.parent().map(|d| d.join(SCENE_CONFIG)).filter(|p| p.exists());
    let mut cfg = match explicit.map(Path::to_path_buf).or(implicit) {
        Some(p) => io::load_config(&p, Config::default())?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(a) = cli.ablation {
        cfg.ablation = a;
    }
    Ok(cfg)
}

fn estimate(cli: &Cli, scene_path: &Path, config: Option<&Path>, only: Option<usize>) -> DataResult<()> {
    let cfg = load_config(cli, scene_path, config)?;
    let scene = io::load_scene(scene_path)?;
    let n = scene.views.len();
    if let Some(v) = only.filter(|&v| v >= n) {
        return Err(format!("view {v} out of range (scene has {n})").into());
    }
    let out = scene.manifest.output_dir();
    std::fs::create_dir_all(&out).map_err(|source| IoError::Io { path: out.clone(), source })?;
    let mut rec = Reconstruction::new(scene.views, scene.manifest.depth_range, cfg)?;
    rec.run();
    for v in 0..n {
        if only.is_some_and(|o| o != v) {
            continue;
        }
        let path = io::depth_map_path(&out, v);
        io::write_depth_map(&path, &rec.depth_map(v))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn fuse_scene(cli: &Cli, scene_path: &Path, config: Option<&Path>) -> DataResult<()> {
    let cfg = load_config(cli, scene_path, config)?;
    let scene = io::load_scene(scene_path)?;
    let out = scene.manifest.output_dir();
    let maps = (0..scene.views.len()).map(|v| io::read_depth_map(&io::depth_map_path(&out, v))).collect::<Result<Vec<_>, _>>()?;
    let views: Vec<FuseView<'_>> = scene
        .views
        .iter()
        .zip(&maps)
        .map(|(v, m)| FuseView { camera: &v.camera, depth: m, image: Some(&v.image) })
        .collect();
    let cloud = fuse(&views, &FuseParams::from(&cfg));
    let path = io::cloud_path(&out);
    io::write_ply(&path, &cloud)?;
    println!("{} points -> {}", cloud.len(), path.display());
    Ok(())
}

fn synth_scene(cli: &Cli, preset: &str, out: &Path) -> DataResult<()> {
    let preset: Preset = preset.parse()?;
    let scene = synth::generate(preset, cli.seed.unwrap_or(0));
    let manifest = scene.write(out)?;
    let cfg = Config::synthetic();
    let cfg_path = out.join(SCENE_CONFIG);
    std::fs::write(&cfg_path, cfg.to_text()).map_err(|source| IoError::Io { path: cfg_path, source })?;
    println!("{}", manifest.display());
    Ok(())
}

fn eval(scene_path: &Path, gt_dir: &Path) -> DataResult<()> {
    let manifest = io::load_manifest(scene_path)?;
    let out = manifest.output_dir();
    let n = manifest.images.len();
    let est = (0..n).map(|v| io::read_depth_map(&io::depth_map_path(&out, v))).collect::<Result<Vec<_>, _>>()?;
    let gt = (0..n).map(|v| io::read_depth_map(&io::depth_map_path(gt_dir, v))).collect::<Result<Vec<_>, _>>()?;
    let metrics = synth::score(&est, &gt, &synth::DEFAULT_THRESHOLDS)?;
    println!("{:>9} {:>9} {:>9} {:>9}", "threshold", "acc%", "comp%", "f1%");
    for m in metrics {
        println!("{:>8.1}% {:>9.2} {:>9.2} {:>9.2}", m.threshold * 100.0, m.accuracy, m.completeness, m.f1);
    }
    Ok(())
}

fn segment(scene_path: &Path) -> DataResult<()> {
    let scene = io::load_scene(scene_path)?;
    let mut manifest = scene.manifest.clone();
    let out = manifest.output_dir();
    std::fs::create_dir_all(&out).map_err(|source| IoError::Io { path: out.clone(), source })?;
    for (v, view) in scene.views.iter().enumerate() {
        let labels = fallback_segment(&view.image, &FallbackParams::default());
        let path = out.join(format!("segment_{v:03}.png"));
        io::write_label_png16(&path, &labels)?;
        println!("{}: {} regions", path.display(), labels.distinct_labels().len());
        manifest.images[v].labels = Some(path.canonicalize().unwrap_or(path));
    }
    let stem = scene_path.file_stem().and_then(|s| s.to_str()).unwrap_or("scene");
    let new_path = scene_path.with_file_name(format!("{stem}_segmented.txt"));
    std::fs::write(&new_path, manifest.to_text()).map_err(|source| IoError::Io { path: new_path.clone(), source })?;
    println!("{}", new_path.display());
    Ok(())
}

fn run(cli: &Cli) -> DataResult<()> {
    match &cli.command {
        Command::Estimate { scene, config, view } => estimate(cli, scene, config.as_deref(), *view),
        Command::Fuse { scene, config } => fuse_scene(cli, scene, config.as_deref()),
        Command::Synth { preset, out } => synth_scene(cli, preset, out),
        Command::Eval { scene, gt } => eval(scene, gt),
        Command::Segment { scene } => segment(scene),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
