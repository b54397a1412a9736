use ply_rs::parser::Parser;
use ply_rs::ply::{DefaultElement, Property};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segmvs_core::geometry::{look_at, Mat3, Vec3};
use segmvs_core::io::{self, ImageEntry, SceneManifest};
use segmvs_core::pipeline::FusedPoint;
use segmvs_core::synth::{self, Preset};
use segmvs_core::{DepthMap, FusedPointCloud, InstanceLabelMap};
use std::path::{Path, PathBuf};

fn random_manifest(r: &mut ChaCha8Rng) -> SceneManifest {
    let n = r.random_range(2..7);
    let images = (0..n)
        .map(|i| {
            let c = Vec3::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(-3.0..-0.5));
            let f = r.random_range(50.0..900.0);
            ImageEntry {
                path: format!("img/v{i}.png").into(),
                k: Mat3::new(f, 0.0, r.random_range(10.0..300.0), 0.0, f * r.random_range(0.9..1.1), r.random_range(10.0..300.0), 0.0, 0.0, 1.0),
                r: look_at(&c, &Vec3::new(r.random_range(-0.5..0.5), 0.0, 3.0)),
                c,
                labels: r.random_bool(0.5).then(|| PathBuf::from(format!("seg/v{i}.rle"))),
            }
        })
        .collect();
    let lo = r.random_range(0.1..2.0);
    SceneManifest {
        base_dir: "/data/scene".into(),
        images,
        depth_range: (lo, lo + r.random_range(0.5..20.0)),
        output: if r.random_bool(0.5) { "out".into() } else { "/abs/results".into() },
        matches: r.random_bool(0.5).then(|| "matches.txt".into()),
    }
}

#[test]
fn random_manifests_survive_text_round_trip() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let m = random_manifest(&mut r);
        let back = io::parse_manifest(&m.to_text(), Path::new("/data/scene/scene.txt")).unwrap();
        assert_eq!(back, m);
    }
}

#[test]
fn depth_map_file_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let (w, h) = (67, 41);
    let map = DepthMap {
        width: w,
        height: h,
        depths: (0..w * h).map(|_| if r.random_bool(0.1) { 0.0 } else { r.random_range(0.1f32..50.0) }).collect(),
        normals: (0..w * h).map(|_| [r.random_range(-1.0f32..1.0), r.random_range(-1.0f32..1.0), r.random_range(-1.0f32..0.0)]).collect(),
        costs: (0..w * h).map(|_| r.random_range(0.0f32..2.0)).collect(),
    };
    let path = io::depth_map_path(dir.path(), 3);
    io::write_depth_map(&path, &map).unwrap();
    let back = io::read_depth_map(&path).unwrap();
    assert_eq!(io::encode_depth_map(&back).unwrap(), io::encode_depth_map(&map).unwrap());
    assert_eq!(back, map);
}

#[test]
fn label_maps_round_trip_through_png_and_rle() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(13);
    let map = InstanceLabelMap::from_fn(50, 37, |_, _| r.random_range(0..3000));
    let png = dir.path().join("labels.png");
    io::write_label_png16(&png, &map).unwrap();
    assert_eq!(io::load_label_map(&png, Some((50, 37))).unwrap(), map);
    let rle = dir.path().join("labels.rle");
    io::write_label_rle(&rle, &map).unwrap();
    assert_eq!(io::load_label_map(&rle, None).unwrap(), map);
    assert!(io::load_label_map(&rle, Some((51, 37))).is_err());
}

#[test]
fn ply_reads_back_with_independent_parser() {
    let mut r = ChaCha8Rng::seed_from_u64(14);
    let cloud = FusedPointCloud {
        points: (0..10_000)
            .map(|_| FusedPoint {
                position: Vec3::new(r.random_range(-10.0..10.0), r.random_range(-10.0..10.0), r.random_range(0.0..30.0)),
                normal: Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)).normalize(),
                color: [r.random(), r.random(), r.random()],
            })
            .collect(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cloud.ply");
    io::write_ply(&path, &cloud).unwrap();
    let mut f = std::fs::File::open(&path).unwrap();
    let ply = Parser::<DefaultElement>::new().read_ply(&mut f).unwrap();
    let verts = &ply.payload["vertex"];
    assert_eq!(verts.len(), cloud.len());
    let float = |e: &DefaultElement, k: &str| match e[k] {
        Property::Float(v) => v,
        ref other => panic!("{k}: {other:?}"),
    };
    let byte = |e: &DefaultElement, k: &str| match e[k] {
        Property::UChar(v) => v,
        ref other => panic!("{k}: {other:?}"),
    };
    for (e, p) in verts.iter().zip(&cloud.points) {
        assert_eq!([float(e, "x"), float(e, "y"), float(e, "z")], [p.position.x as f32, p.position.y as f32, p.position.z as f32]);
        assert_eq!([float(e, "nx"), float(e, "ny"), float(e, "nz")], [p.normal.x as f32, p.normal.y as f32, p.normal.z as f32]);
        assert_eq!([byte(e, "red"), byte(e, "green"), byte(e, "blue")], p.color);
    }
}

#[test]
fn written_synthetic_scene_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth::generate(Preset::SlantedBox, 2);
    let manifest = scene.write(dir.path()).unwrap();
    let loaded = io::load_scene(&manifest).unwrap();
    assert_eq!(loaded.views.len(), scene.cameras.len());
    for (v, view) in loaded.views.iter().enumerate() {
        assert_eq!(view.camera.k(), scene.cameras[v].k());
        assert!((view.camera.rotation() - scene.cameras[v].rotation()).norm() < 1e-12);
        assert!((view.camera.center() - scene.cameras[v].center()).norm() < 1e-12);
        assert_eq!(view.labels.as_ref(), Some(&scene.gt[v].labels));
        let (a, b) = (view.image.samples(), scene.images[v].samples());
        assert_eq!(a.len(), b.len());
        // 8-bit quantization
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-6));
    }
    assert_eq!(loaded.manifest.depth_range, scene.depth_range);
}
