//! Fixtures shared by the kernel benchmarks.

use segmvs_core::geometry::{look_at, CameraModel, Mat3, Vec3};
use segmvs_core::synth::{self, Preset, SynthOptions, SynthScene};
use segmvs_core::{Config, ImageGrid, InstanceLabelMap, Reconstruction};

/// Deterministic textured gray image.
pub fn textured_image(width: usize, height: usize) -> ImageGrid {
    ImageGrid::from_fn(width, height, 1, |x, y, _| {
        let (x, y) = (x as f32, y as f32);
        0.5 + 0.2 * (0.37 * x + 0.11 * y).sin() + 0.15 * (0.05 * x * y).sin() + 0.1 * (1.3 * x - 0.7 * y).cos()
    })
}

/// Blocky label map with `cell`-sized instances.
pub fn block_labels(width: usize, height: usize, cell: usize) -> InstanceLabelMap {
    InstanceLabelMap::from_fn(width, height, |x, y| ((x / cell) + 1000 * (y / cell)) as u32)
}

/// Pair of cameras with a short horizontal baseline.
pub fn stereo_pair(width: usize, height: usize) -> (CameraModel, CameraModel) {
    let k = Mat3::new(140.0, 0.0, (width as f64 - 1.0) / 2.0, 0.0, 140.0, (height as f64 - 1.0) / 2.0, 0.0, 0.0, 1.0);
    let target = Vec3::new(0.0, 0.0, 2.5);
    let mk = |c: Vec3| CameraModel::new(k, look_at(&c, &target), c, width, height).expect("valid camera");
    (mk(Vec3::zeros()), mk(Vec3::new(0.15, 0.0, 0.0)))
}

/// Small synthetic scene for whole-pipeline timings.
pub fn small_scene(preset: Preset) -> SynthScene {
    let opts = SynthOptions { width: 96, height: 72, focal: 84.0, ..SynthOptions::default() };
    synth::generate_with(preset, 0, &opts)
}

/// Reconstruction of [`small_scene`] ready to run.
pub fn small_reconstruction(preset: Preset, cfg: Config) -> Reconstruction {
    let scene = small_scene(preset);
    Reconstruction::new(scene.view_inputs(true), scene.depth_range, cfg).expect("valid scene")
}
