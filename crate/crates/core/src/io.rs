//! File formats: scene manifests (native and COLMAP text), images, label
//! maps (16-bit PNG and RLE text), SDMD depth maps, binary PLY clouds,
//! match files and config files.

use crate::config::{Config, ConfigError};
use crate::emopt::{Anchor, AnchorSet};
use crate::geometry::{CameraModel, GeometryError, Mat3, Vec3};
use crate::imaging::ImageGrid;
use crate::pipeline::{DepthMap, FusedPointCloud, ViewInput};
use crate::segmentation::InstanceLabelMap;
use nalgebra::{Quaternion, UnitQuaternion};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("view {view}: {source}")]
    InvalidCamera { view: usize, source: GeometryError },
    #[error("expected {expected:?}, got {got:?}")]
    DimensionMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("{path}: cannot decode: {msg}")]
    Decode { path: PathBuf, msg: String },
    #[error("not an SDMD depth map")]
    MagicMismatch,
    #[error("file ends early")]
    TruncatedFile,
    #[error("empty map")]
    EmptyMap,
    #[error("{path}: {source}")]
    Config { path: PathBuf, source: ConfigError },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn read_text(path: &Path) -> Result<String, IoError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(io_err(path))
}

/// One view of a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    pub path: PathBuf,
    pub k: Mat3,
    pub r: Mat3,
    pub c: Vec3,
    pub labels: Option<PathBuf>,
}

/// Scene description. Relative paths are resolved against `base_dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneManifest {
    pub base_dir: PathBuf,
    pub images: Vec<ImageEntry>,
    pub depth_range: (f64, f64),
    pub output: PathBuf,
    pub matches: Option<PathBuf>,
}

impl SceneManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output)
    }

    /// Native text form; paths are written as stored.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# segmvs scene\n");
        let _ = writeln!(s, "depth_range {} {}", self.depth_range.0, self.depth_range.1);
        let _ = writeln!(s, "output {}", self.output.display());
        if let Some(m) = &self.matches {
            let _ = writeln!(s, "matches {}", m.display());
        }
        let row = |m: &Mat3| (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| m[(i, j)].to_string()).collect::<Vec<_>>().join(" ");
        for e in &self.images {
            let _ = writeln!(s, "\nimage {}", e.path.display());
            let _ = writeln!(s, "  K {}", row(&e.k));
            let _ = writeln!(s, "  R {}", row(&e.r));
            let _ = writeln!(s, "  C {} {} {}", e.c.x, e.c.y, e.c.z);
            if let Some(l) = &e.labels {
                let _ = writeln!(s, "  labels {}", l.display());
            }
        }
        s
    }
}

fn parse_floats(path: &Path, line: usize, toks: &[&str], n: usize) -> Result<Vec<f64>, IoError> {
    if toks.len() != n {
        return Err(IoError::Parse { path: path.into(), line, msg: format!("expected {n} numbers, got {}", toks.len()) });
    }
    toks.iter()
        .map(|t| t.parse::<f64>().map_err(|_| IoError::Parse { path: path.into(), line, msg: format!("bad number `{t}`") }))
        .collect()
}

fn mat3(v: &[f64]) -> Mat3 {
    Mat3::from_row_slice(v)
}

/// Parses the native manifest text. `path` is used for diagnostics and as
/// the base for relative paths (its parent directory). A `colmap <dir>`
/// line imports `cameras.txt` and `images.txt` from that directory.
pub fn parse_manifest(text: &str, path: &Path) -> Result<SceneManifest, IoError> {
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut m = SceneManifest { base_dir, images: Vec::new(), depth_range: (0.0, 0.0), output: PathBuf::from("out"), matches: None };
    let mut have_range = false;
    // image block being read: (line, path, K, R, C, labels)
    type Partial = (usize, PathBuf, Option<Mat3>, Option<Mat3>, Option<Vec3>, Option<PathBuf>);
    let mut partial: Option<Partial> = None;
    let perr = |line: usize, msg: String| IoError::Parse { path: path.into(), line, msg };
    let finish = |p: Option<Partial>,
                  out: &mut Vec<ImageEntry>|
     -> Result<(), IoError> {
        if let Some((line, ip, k, r, c, labels)) = p {
            let (Some(k), Some(r), Some(c)) = (k, r, c) else {
                return Err(IoError::Parse { path: path.into(), line, msg: "image block needs K, R and C".into() });
            };
            out.push(ImageEntry { path: ip, k, r, c, labels });
        }
        Ok(())
    };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        let toks: Vec<&str> = body.split_whitespace().collect();
        let Some((&key, rest)) = toks.split_first() else { continue };
        let one = || -> Result<PathBuf, IoError> {
            match rest {
                [p] => Ok(PathBuf::from(p)),
                _ => Err(perr(line, format!("`{key}` takes one path"))),
            }
        };
        match key {
            "depth_range" => {
                let v = parse_floats(path, line, rest, 2)?;
                m.depth_range = (v[0], v[1]);
                have_range = true;
            }
            "output" => m.output = one()?,
            "matches" => m.matches = Some(one()?),
            "colmap" => {
                finish(partial.take(), &mut m.images)?;
                let dir = m.resolve(&one()?);
                m.images.extend(load_colmap(&dir)?);
            }
            "image" => {
                finish(partial.take(), &mut m.images)?;
                partial = Some((line, one()?, None, None, None, None));
            }
            "K" | "R" | "C" | "labels" => {
                let Some(p) = partial.as_mut() else {
                    return Err(perr(line, format!("`{key}` outside an image block")));
                };
                match key {
                    "K" => p.2 = Some(mat3(&parse_floats(path, line, rest, 9)?)),
                    "R" => p.3 = Some(mat3(&parse_floats(path, line, rest, 9)?)),
                    "C" => {
                        let v = parse_floats(path, line, rest, 3)?;
                        p.4 = Some(Vec3::new(v[0], v[1], v[2]));
                    }
                    _ => p.5 = Some(one()?),
                }
            }
            other => return Err(perr(line, format!("unknown key `{other}`"))),
        }
    }
    finish(partial.take(), &mut m.images)?;
    if !have_range {
        return Err(perr(0, "missing depth_range".into()));
    }
    if !(m.depth_range.0 > 0.0 && m.depth_range.0 < m.depth_range.1) {
        return Err(perr(0, format!("depth_range must satisfy 0 < min < max, got {:?}", m.depth_range)));
    }
    if m.images.len() < 2 {
        return Err(perr(0, format!("need at least 2 images, got {}", m.images.len())));
    }
    Ok(m)
}

/// Reads COLMAP text calibration (`PINHOLE` or `SIMPLE_PINHOLE`). Pixel
/// centers are shifted by half a pixel to this crate's convention.
pub fn load_colmap(dir: &Path) -> Result<Vec<ImageEntry>, IoError> {
    let cam_path = dir.join("cameras.txt");
    let img_path = dir.join("images.txt");
    let cams_text = read_text(&cam_path)?;
    let imgs_text = read_text(&img_path)?;
    let mut intrinsics = std::collections::HashMap::new();
    for (i, raw) in cams_text.lines().enumerate() {
        let t: Vec<&str> = raw.split_whitespace().collect();
        if t.is_empty() || t[0].starts_with('#') {
            continue;
        }
        let perr = |msg: String| IoError::Parse { path: cam_path.clone(), line: i + 1, msg };
        if t.len() < 4 {
            return Err(perr("short camera line".into()));
        }
        let params = parse_floats(&cam_path, i + 1, &t[4..], t.len() - 4)?;
        let (fx, fy, cx, cy) = match (t[1], params.as_slice()) {
            ("PINHOLE", [fx, fy, cx, cy]) => (*fx, *fy, *cx, *cy),
            ("SIMPLE_PINHOLE", [f, cx, cy]) => (*f, *f, *cx, *cy),
            (model, _) => return Err(perr(format!("unsupported camera model `{model}`"))),
        };
        let k = Mat3::new(fx, 0.0, cx - 0.5, 0.0, fy, cy - 0.5, 0.0, 0.0, 1.0);
        intrinsics.insert(t[0].to_string(), k);
    }
    let mut out = Vec::new();
    let mut expect_points = false;
    for (i, raw) in imgs_text.lines().enumerate() {
        if raw.trim_start().starts_with('#') {
            continue;
        }
        if expect_points {
            expect_points = false;
            continue;
        }
        let t: Vec<&str> = raw.split_whitespace().collect();
        if t.is_empty() {
            continue;
        }
        let perr = |msg: String| IoError::Parse { path: img_path.clone(), line: i + 1, msg };
        if t.len() < 10 {
            return Err(perr("image line needs 10 fields".into()));
        }
        let v = parse_floats(&img_path, i + 1, &t[1..8], 7)?;
        let q = UnitQuaternion::from_quaternion(Quaternion::new(v[0], v[1], v[2], v[3]));
        let r: Mat3 = q.to_rotation_matrix().into_inner();
        let tvec = Vec3::new(v[4], v[5], v[6]);
        let k = *intrinsics.get(t[8]).ok_or_else(|| perr(format!("unknown camera id {}", t[8])))?;
        out.push(ImageEntry { path: dir.join(t[9]), k, r, c: -r.transpose() * tvec, labels: None });
        expect_points = true;
    }
    Ok(out)
}

/// Decodes PNG or PNM into a grid with values in [0, 1]; gray images keep
/// one channel, everything else becomes RGB.
pub fn read_image(path: &Path) -> Result<ImageGrid, IoError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| IoError::Decode { path: path.into(), msg: e.to_string() })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let grid = if img.color().channel_count() <= 2 {
        let g = img.into_luma16();
        ImageGrid::new(w, h, 1, g.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect())
    } else {
        let c = img.into_rgb16();
        ImageGrid::new(w, h, 3, c.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect())
    };
    grid.map_err(|e| IoError::Decode { path: path.into(), msg: e.to_string() })
}

/// 8-bit PNG of a 1- or 3-channel grid.
pub fn write_image_png(path: &Path, img: &ImageGrid) -> Result<(), IoError> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let bytes: Vec<u8> = img.samples().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let color = if img.channels() == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    image::save_buffer(path, &bytes, w, h, color).map_err(|e| IoError::Decode { path: path.into(), msg: e.to_string() })
}

/// Run-length text: `RLE <width> <height>` followed by `label run` pairs in
/// row-major order.
pub fn label_map_to_rle(map: &InstanceLabelMap) -> String {
    let mut s = format!("RLE {} {}\n", map.width(), map.height());
    let labels = map.labels();
    let mut i = 0;
    while i < labels.len() {
        let mut j = i;
        while j < labels.len() && labels[j] == labels[i] {
            j += 1;
        }
        let _ = writeln!(s, "{} {}", labels[i], j - i);
        i = j;
    }
    s
}

pub fn parse_rle(text: &str, path: &Path) -> Result<InstanceLabelMap, IoError> {
    let perr = |msg: &str| IoError::Decode { path: path.into(), msg: msg.into() };
    let mut toks = text.split_whitespace();
    if toks.next() != Some("RLE") {
        return Err(perr("missing RLE header"));
    }
    let mut num = || -> Result<u64, IoError> { toks.next().ok_or_else(|| perr("truncated"))?.parse().map_err(|_| perr("bad number")) };
    let (w, h) = (num()? as usize, num()? as usize);
    let mut labels = Vec::with_capacity(w * h);
    while labels.len() < w * h {
        let (l, n) = (num()? as u32, num()? as usize);
        if n == 0 || labels.len() + n > w * h {
            return Err(perr("run overflows the map"));
        }
        labels.extend(std::iter::repeat_n(l, n));
    }
    InstanceLabelMap::new(w, h, labels).map_err(|e| perr(&e.to_string()))
}

/// 16-bit single-channel PNG; labels must fit in 16 bits.
pub fn write_label_png16(path: &Path, map: &InstanceLabelMap) -> Result<(), IoError> {
    let raw = map
        .labels()
        .iter()
        .map(|&l| u16::try_from(l).map_err(|_| IoError::Decode { path: path.into(), msg: format!("label {l} exceeds 16 bits") }))
        .collect::<Result<Vec<u16>, _>>()?;
    let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(map.width() as u32, map.height() as u32, raw)
        .expect("buffer matches the map size");
    buf.save(path).map_err(|e| IoError::Decode { path: path.into(), msg: e.to_string() })
}

pub fn write_label_rle(path: &Path, map: &InstanceLabelMap) -> Result<(), IoError> {
    std::fs::write(path, label_map_to_rle(map)).map_err(io_err(path))
}

/// Reads a label map from a 16-bit (or 8-bit) gray PNG, or from RLE text
/// when the file starts with `RLE`. `expected` checks the dimensions.
pub fn load_label_map(path: &Path, expected: Option<(usize, usize)>) -> Result<InstanceLabelMap, IoError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let map = if bytes.starts_with(b"RLE") {
        parse_rle(&String::from_utf8_lossy(&bytes), path)?
    } else {
        let img = image::load_from_memory(&bytes).map_err(|e| IoError::Decode { path: path.into(), msg: e.to_string() })?;
        if img.color().channel_count() != 1 {
            return Err(IoError::Decode { path: path.into(), msg: "label PNG must be single-channel".into() });
        }
        let (w, h) = (img.width() as usize, img.height() as usize);
        let labels = match img {
            image::DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(u32::from).collect(),
            other => other.into_luma16().into_raw().into_iter().map(u32::from).collect(),
        };
        InstanceLabelMap::new(w, h, labels).map_err(|e| IoError::Decode { path: path.into(), msg: e.to_string() })?
    };
    if let Some(exp) = expected {
        if (map.width(), map.height()) != exp {
            return Err(IoError::DimensionMismatch { expected: exp, got: (map.width(), map.height()) });
        }
    }
    Ok(map)
}

const SDMD_MAGIC: &[u8; 4] = b"SDMD";

pub fn encode_depth_map(map: &DepthMap) -> Result<Vec<u8>, IoError> {
    let n = map.width * map.height;
    if n == 0 {
        return Err(IoError::EmptyMap);
    }
    if map.depths.len() != n || map.normals.len() != n || map.costs.len() != n {
        return Err(IoError::DimensionMismatch { expected: (map.width, map.height), got: (map.depths.len(), 1) });
    }
    let mut out = Vec::with_capacity(12 + 20 * n);
    out.extend_from_slice(SDMD_MAGIC);
    out.extend_from_slice(&(map.width as u32).to_le_bytes());
    out.extend_from_slice(&(map.height as u32).to_le_bytes());
    for d in &map.depths {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for n in &map.normals {
        for v in n {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for c in &map.costs {
        out.extend_from_slice(&c.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_depth_map(bytes: &[u8]) -> Result<DepthMap, IoError> {
    if bytes.len() < 4 {
        return Err(IoError::TruncatedFile);
    }
    if &bytes[..4] != SDMD_MAGIC {
        return Err(IoError::MagicMismatch);
    }
    if bytes.len() < 12 {
        return Err(IoError::TruncatedFile);
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let (w, h) = (u32_at(4) as usize, u32_at(8) as usize);
    let n = w * h;
    if n == 0 {
        return Err(IoError::EmptyMap);
    }
    if bytes.len() < 12 + 20 * n {
        return Err(IoError::TruncatedFile);
    }
    let f = |i: usize| f32::from_le_bytes(bytes[12 + 4 * i..16 + 4 * i].try_into().expect("4 bytes"));
    Ok(DepthMap {
        width: w,
        height: h,
        depths: (0..n).map(f).collect(),
        normals: (0..n).map(|i| [f(n + 3 * i), f(n + 3 * i + 1), f(n + 3 * i + 2)]).collect(),
        costs: (0..n).map(|i| f(4 * n + i)).collect(),
    })
}

pub fn write_depth_map(path: &Path, map: &DepthMap) -> Result<(), IoError> {
    std::fs::write(path, encode_depth_map(map)?).map_err(io_err(path))
}

pub fn read_depth_map(path: &Path) -> Result<DepthMap, IoError> {
    if !path.exists() {
        return Err(IoError::MissingFile(path.to_path_buf()));
    }
    decode_depth_map(&std::fs::read(path).map_err(io_err(path))?)
}

/// Binary little-endian PLY with position, normal and color per vertex.
pub fn encode_ply(cloud: &FusedPointCloud) -> Vec<u8> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property float nx\nproperty float ny\nproperty float nz\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    );
    let mut out = header.into_bytes();
    out.reserve(cloud.len() * 27);
    for p in &cloud.points {
        for v in p.position.iter().chain(p.normal.iter()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.extend_from_slice(&p.color);
    }
    out
}

pub fn write_ply(path: &Path, cloud: &FusedPointCloud) -> Result<(), IoError> {
    std::fs::write(path, encode_ply(cloud)).map_err(io_err(path))
}

/// Match file: lines `src_view x_ref y_ref x_src y_src`. A `view <id>` line
/// selects the reference view of the lines after it (view 0 initially).
/// Returns one anchor set per view.
pub fn parse_matches(text: &str, path: &Path, n_views: usize) -> Result<Vec<AnchorSet>, IoError> {
    let mut sets = vec![AnchorSet::default(); n_views];
    let mut reference = 0usize;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let toks: Vec<&str> = raw.split('#').next().unwrap_or("").split_whitespace().collect();
        let perr = |msg: String| IoError::Parse { path: path.into(), line, msg };
        let view_id = |t: &str| -> Result<usize, IoError> {
            let v: usize = t.parse().map_err(|_| perr(format!("bad view id `{t}`")))?;
            if v >= n_views {
                return Err(perr(format!("view {v} out of range")));
            }
            Ok(v)
        };
        match toks.as_slice() {
            [] => {}
            ["view", id] => reference = view_id(id)?,
            [src, rest @ ..] if rest.len() == 4 => {
                let src_view = view_id(src)?;
                let v = parse_floats(path, line, rest, 4)?;
                sets[reference].anchors.push(Anchor { ref_px: (v[0], v[1]), src_px: (v[2], v[3]), src_view });
            }
            _ => return Err(perr("expected `src_view x_ref y_ref x_src y_src`".into())),
        }
    }
    Ok(sets)
}

pub fn matches_to_text(sets: &[AnchorSet]) -> String {
    let mut s = String::new();
    for (v, set) in sets.iter().enumerate() {
        if set.is_empty() {
            continue;
        }
        let _ = writeln!(s, "view {v}");
        for a in &set.anchors {
            let _ = writeln!(s, "{} {} {} {} {}", a.src_view, a.ref_px.0, a.ref_px.1, a.src_px.0, a.src_px.1);
        }
    }
    s
}

/// Applies a `key = value` config file on top of `base`.
pub fn load_config(path: &Path, base: Config) -> Result<Config, IoError> {
    base.parse_onto(&read_text(path)?).map_err(|source| IoError::Config { path: path.into(), source })
}

/// A manifest with its decoded inputs.
#[derive(Debug, Clone)]
pub struct Scene {
    pub manifest: SceneManifest,
    pub views: Vec<ViewInput>,
}

pub fn load_manifest(path: &Path) -> Result<SceneManifest, IoError> {
    parse_manifest(&read_text(path)?, path)
}

/// Loads the manifest and every file it references.
pub fn load_scene(path: &Path) -> Result<Scene, IoError> {
    let manifest = load_manifest(path)?;
    let match_sets = match &manifest.matches {
        Some(m) => {
            let mp = manifest.resolve(m);
            Some(parse_matches(&read_text(&mp)?, &mp, manifest.images.len())?)
        }
        None => None,
    };
    let mut views = Vec::with_capacity(manifest.images.len());
    for (v, e) in manifest.images.iter().enumerate() {
        let image = read_image(&manifest.resolve(&e.path))?;
        let (w, h) = (image.width(), image.height());
        let camera = CameraModel::new(e.k, e.r, e.c, w, h).map_err(|source| IoError::InvalidCamera { view: v, source })?;
        let labels = e.labels.as_ref().map(|l| load_label_map(&manifest.resolve(l), Some((w, h)))).transpose()?;
        let anchors = match_sets.as_ref().map(|s| s[v].clone());
        views.push(ViewInput { camera, image, labels, anchors });
    }
    Ok(Scene { manifest, views })
}

/// Canonical output names inside a scene's output directory.
pub fn depth_map_path(out_dir: &Path, view: usize) -> PathBuf {
    out_dir.join(format!("depth_{view:03}.sdmd"))
}

pub fn cloud_path(out_dir: &Path) -> PathBuf {
    out_dir.join("fused.ply")
}
