//! Ray-cast synthetic scenes with exact ground truth, and depth-map scoring.

use crate::geometry::{look_at, CameraModel, Mat3, Pixel, Vec3};
use crate::imaging::ImageGrid;
use crate::io::{self, IoError, ImageEntry, SceneManifest};
use crate::pipeline::{DepthMap, ViewInput};
use crate::segmentation::InstanceLabelMap;
use rayon::prelude::*;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("unknown preset `{0}` (expected three-planes, textureless-wall, slanted-box or occlusion-step)")]
    UnknownPreset(String),
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("expected {0} maps, got {1}")]
    ViewCount(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    ThreePlanes,
    TexturelessWall,
    SlantedBox,
    OcclusionStep,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::ThreePlanes, Preset::TexturelessWall, Preset::SlantedBox, Preset::OcclusionStep];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::ThreePlanes => "three-planes",
            Preset::TexturelessWall => "textureless-wall",
            Preset::SlantedBox => "slanted-box",
            Preset::OcclusionStep => "occlusion-step",
        }
    }
}

impl FromStr for Preset {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| SynthError::UnknownPreset(s.into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Texture {
    /// Multi-octave value noise modulating the brightness of `base`.
    Noise { base: [f64; 3], contrast: f64, cell: f64, seed: u64 },
    /// Flat color under smooth shading `s0 + s1 u + s2 v^2`, with `u, v`
    /// normalized to [-1, 1] over the surface.
    Shaded { base: [f64; 3], shade: [f64; 3] },
}

/// A planar rectangle (unbounded when `half` is infinite).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surface {
    pub id: u32,
    pub origin: Vec3,
    pub u_axis: Vec3,
    pub v_axis: Vec3,
    pub half: (f64, f64),
    pub texture: Texture,
}

impl Surface {
    pub fn normal(&self) -> Vec3 {
        self.u_axis.cross(&self.v_axis).normalize()
    }

    /// `(t, u, v)` of the hit of `o + t d`, if in front and inside.
    fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<(f64, f64, f64)> {
        let n = self.normal();
        let denom = n.dot(d);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = n.dot(&(self.origin - o)) / denom;
        if !(t > 0.0) {
            return None;
        }
        let rel = o + d * t - self.origin;
        let (u, v) = (rel.dot(&self.u_axis), rel.dot(&self.v_axis));
        (u.abs() <= self.half.0 && v.abs() <= self.half.1).then_some((t, u, v))
    }

    fn color(&self, u: f64, v: f64) -> [f64; 3] {
        match self.texture {
            Texture::Noise { base, contrast, cell, seed } => {
                let n = 0.5 * value_noise(u / (4.0 * cell), v / (4.0 * cell), seed)
                    + 0.3 * value_noise(u / (2.0 * cell), v / (2.0 * cell), seed ^ 0x5555)
                    + 0.2 * value_noise(u / cell, v / cell, seed ^ 0xaaaa);
                let b = 1.0 - contrast + 2.0 * contrast * n;
                base.map(|c| (c * b).clamp(0.0, 1.0))
            }
            Texture::Shaded { base, shade } => {
                let nu = if self.half.0.is_finite() { u / self.half.0 } else { 0.0 };
                let nv = if self.half.1.is_finite() { v / self.half.1 } else { 0.0 };
                let s = shade[0] + shade[1] * nu + shade[2] * (nu * nu + nv * nv);
                base.map(|c| (c * s).clamp(0.0, 1.0))
            }
        }
    }

    /// Euclidean distance from `x` to the rectangle.
    pub fn distance(&self, x: &Vec3) -> f64 {
        let rel = x - self.origin;
        let u = rel.dot(&self.u_axis).clamp(-self.half.0, self.half.0);
        let v = rel.dot(&self.v_axis).clamp(-self.half.1, self.half.1);
        (rel - self.u_axis * u - self.v_axis * v).norm()
    }
}

fn hash01(i: i64, j: i64, seed: u64) -> f64 {
    let mut z = seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (j as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (s(fx), s(fy));
    let (i, j) = (x0 as i64, y0 as i64);
    let a = hash01(i, j, seed) * (1.0 - sx) + hash01(i + 1, j, seed) * sx;
    let b = hash01(i, j + 1, seed) * (1.0 - sx) + hash01(i + 1, j + 1, seed) * sx;
    a * (1.0 - sy) + b * sy
}

/// Rotation by `yaw` about world y then `pitch` about world x (degrees).
fn orient(yaw: f64, pitch: f64) -> Mat3 {
    let (a, b) = (yaw.to_radians(), pitch.to_radians());
    let ry = Mat3::new(a.cos(), 0.0, a.sin(), 0.0, 1.0, 0.0, -a.sin(), 0.0, a.cos());
    let rx = Mat3::new(1.0, 0.0, 0.0, 0.0, b.cos(), -b.sin(), 0.0, b.sin(), b.cos());
    rx * ry
}

fn panel(id: u32, origin: [f64; 3], yaw: f64, pitch: f64, half: (f64, f64), texture: Texture) -> Surface {
    let r = orient(yaw, pitch);
    Surface { id, origin: Vec3::from(origin), u_axis: r * Vec3::x(), v_axis: r * Vec3::y(), half, texture }
}

fn noise(base: [f64; 3], seed: u64) -> Texture {
    Texture::Noise { base, contrast: 0.3, cell: 0.03, seed }
}

fn boxed(first_id: u32, center: [f64; 3], size: [f64; 3], yaw: f64, pitch: f64, colors: &[[f64; 3]; 6], seed: u64) -> Vec<Surface> {
    let r = orient(yaw, pitch);
    let axes = [r * Vec3::x(), r * Vec3::y(), r * Vec3::z()];
    let c = Vec3::from(center);
    let mut out = Vec::new();
    for a in 0..3 {
        let (b, d) = ((a + 1) % 3, (a + 2) % 3);
        for (s, sign) in [-1.0, 1.0].into_iter().enumerate() {
            let k = 2 * a + s;
            out.push(Surface {
                id: first_id + k as u32,
                origin: c + axes[a] * (sign * size[a] / 2.0),
                u_axis: axes[b],
                v_axis: axes[d],
                half: (size[b] / 2.0, size[d] / 2.0),
                texture: noise(colors[k], seed.wrapping_add(k as u64 * 7919)),
            });
        }
    }
    out
}

fn surfaces(preset: Preset, seed: u64) -> Vec<Surface> {
    let inf = (f64::INFINITY, f64::INFINITY);
    let s = |k: u64| seed.wrapping_mul(0x9e37_79b9).wrapping_add(k);
    match preset {
        Preset::ThreePlanes => vec![
            panel(1, [0.0, 0.0, 3.3], 12.0, 0.0, inf, noise([0.85, 0.4, 0.35], s(1))),
            panel(2, [-0.45, 0.0, 2.4], -25.0, 5.0, (0.35, 0.9), noise([0.35, 0.8, 0.4], s(2))),
            panel(3, [0.35, 0.4, 2.2], 10.0, 40.0, (0.5, 0.3), noise([0.35, 0.45, 0.9], s(3))),
        ],
        Preset::TexturelessWall => vec![
            panel(1, [0.0, 0.0, 3.3], 8.0, 0.0, inf, noise([0.8, 0.45, 0.35], s(1))),
            panel(2, [0.05, -0.05, 2.3], 15.0, -8.0, (0.75, 0.55), Texture::Shaded { base: [0.85, 0.8, 0.7], shade: [0.75, 0.2, -0.12] }),
        ],
        Preset::SlantedBox => {
            let mut v = vec![panel(1, [0.0, 0.0, 3.4], -6.0, 0.0, inf, noise([0.75, 0.7, 0.45], s(1)))];
            let colors = [[0.9, 0.35, 0.3], [0.3, 0.8, 0.35], [0.35, 0.4, 0.9], [0.85, 0.75, 0.3], [0.75, 0.35, 0.8], [0.3, 0.8, 0.8]];
            v.extend(boxed(2, [0.0, 0.05, 2.55], [0.8, 0.6, 0.6], 35.0, -20.0, &colors, s(2)));
            v
        }
        Preset::OcclusionStep => vec![
            panel(1, [0.0, 0.0, 3.2], 5.0, 0.0, inf, noise([0.7, 0.55, 0.4], s(1))),
            panel(2, [-1.25, 0.0, 2.2], 0.0, 0.0, (1.4, 2.0), noise([0.71, 0.55, 0.41], s(2))),
        ],
    }
}

/// Per-view ground truth. Depth and normals are in the camera frame; depth
/// 0 marks pixels whose ray misses every surface. `visible` marks pixels
/// that at least one other view also sees.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub normals: Vec<Vec3>,
    pub labels: InstanceLabelMap,
    pub visible: Vec<bool>,
}

impl GroundTruth {
    pub fn to_depth_map(&self) -> DepthMap {
        DepthMap {
            width: self.width,
            height: self.height,
            depths: self.depth.iter().map(|&d| d as f32).collect(),
            normals: self.normals.iter().map(|n| [n.x as f32, n.y as f32, n.z as f32]).collect(),
            costs: vec![0.0; self.depth.len()],
        }
    }
}

/// Rig and image size of a generated scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub views: usize,
    pub baseline: f64,
    pub target: [f64; 3],
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { width: 160, height: 120, focal: 140.0, views: 4, baseline: 0.15, target: [0.0, 0.0, 2.6] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub preset: Preset,
    pub seed: u64,
    pub surfaces: Vec<Surface>,
    pub cameras: Vec<CameraModel>,
    pub images: Vec<ImageGrid>,
    pub gt: Vec<GroundTruth>,
    pub depth_range: (f64, f64),
}

fn rig(opts: &SynthOptions) -> Vec<CameraModel> {
    let k = Mat3::new(
        opts.focal,
        0.0,
        (opts.width as f64 - 1.0) / 2.0,
        0.0,
        opts.focal,
        (opts.height as f64 - 1.0) / 2.0,
        0.0,
        0.0,
        1.0,
    );
    let b = opts.baseline;
    // square rig first, then further views on a ring
    (0..opts.views)
        .map(|i| {
            let c = if i < 4 {
                let (sx, sy) = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)][i];
                Vec3::new(sx * b, sy * b, 0.0)
            } else {
                let a = i as f64 * 2.399_963;
                Vec3::new(1.4 * b * a.cos(), 1.4 * b * a.sin(), 0.0)
            };
            let r = look_at(&c, &Vec3::from(opts.target));
            CameraModel::new(k, r, c, opts.width, opts.height).expect("rig cameras are valid")
        })
        .collect()
}

fn cast(surfaces: &[Surface], o: &Vec3, d: &Vec3) -> Option<(usize, f64, f64, f64)> {
    let mut best: Option<(usize, f64, f64, f64)> = None;
    for (i, s) in surfaces.iter().enumerate() {
        if let Some((t, u, v)) = s.intersect(o, d) {
            if best.is_none_or(|b| t < b.1) {
                best = Some((i, t, u, v));
            }
        }
    }
    best
}

fn render(surfaces: &[Surface], cam: &CameraModel) -> (ImageGrid, GroundTruth) {
    let (w, h) = (cam.width(), cam.height());
    let rt = cam.rotation().transpose();
    let dir = |x: f64, y: f64| rt * cam.ray(&Pixel::new(x, y));
    let o = *cam.center();
    let px: Vec<([f32; 3], f64, Vec3, u32)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let mut col = [0.0f64; 3];
            for sy in [-1.0, 0.0, 1.0] {
                for sx in [-1.0, 0.0, 1.0] {
                    if let Some((s, _, u, v)) = cast(surfaces, &o, &dir(x + sx / 3.0, y + sy / 3.0)) {
                        let c = surfaces[s].color(u, v);
                        for k in 0..3 {
                            col[k] += c[k] / 9.0;
                        }
                    }
                }
            }
            let col = col.map(|c| c as f32);
            // the ray direction has unit z in the camera frame, so t is depth
            match cast(surfaces, &o, &dir(x, y)) {
                Some((s, t, _, _)) => {
                    let mut n = cam.rotation() * surfaces[s].normal();
                    if n.dot(&cam.ray(&Pixel::new(x, y))) > 0.0 {
                        n = -n;
                    }
                    (col, t, n, surfaces[s].id)
                }
                None => (col, 0.0, Vec3::zeros(), 0),
            }
        })
        .collect();
    let samples = px.iter().flat_map(|p| p.0).collect();
    let image = ImageGrid::new(w, h, 3, samples).expect("sizes match");
    let gt = GroundTruth {
        width: w,
        height: h,
        depth: px.iter().map(|p| p.1).collect(),
        normals: px.iter().map(|p| p.2).collect(),
        labels: InstanceLabelMap::new(w, h, px.iter().map(|p| p.3).collect()).expect("sizes match"),
        visible: vec![false; w * h],
    };
    (image, gt)
}

/// Pixels of view `v` whose surface point is the first hit from at least one
/// other camera and projects inside its image.
fn covisibility(surfaces: &[Surface], cameras: &[CameraModel], v: usize, depth: &[f64]) -> Vec<bool> {
    let cam = &cameras[v];
    let w = cam.width();
    depth
        .par_iter()
        .enumerate()
        .map(|(i, &d)| {
            let Ok(x) = cam.unproject(&Pixel::new((i % w) as f64, (i / w) as f64), d) else { return false };
            cameras.iter().enumerate().any(|(s, c)| {
                let Ok(p) = c.project(&x) else { return false };
                if s == v || !c.contains(&p.pixel) {
                    return false;
                }
                let dir = c.rotation().transpose() * c.ray(&p.pixel);
                cast(surfaces, c.center(), &dir).is_some_and(|hit| (hit.1 - p.depth).abs() <= 1e-6 * p.depth)
            })
        })
        .collect()
}

/// Renders `preset` with the default rig (4 views, 160x120).
pub fn generate(preset: Preset, seed: u64) -> SynthScene {
    generate_with(preset, seed, &SynthOptions::default())
}

pub fn generate_with(preset: Preset, seed: u64, opts: &SynthOptions) -> SynthScene {
    let surfaces = surfaces(preset, seed);
    let cameras = rig(opts);
    let (images, mut gt): (Vec<_>, Vec<_>) = cameras.iter().map(|c| render(&surfaces, c)).unzip();
    for (v, g) in gt.iter_mut().enumerate() {
        g.visible = covisibility(&surfaces, &cameras, v, &g.depth);
    }
    SynthScene { preset, seed, surfaces, cameras, images, gt, depth_range: (1.0, 5.0) }
}

impl SynthScene {
    /// Pipeline inputs; `with_labels` supplies the ground-truth instance
    /// maps as the segmentation.
    pub fn view_inputs(&self, with_labels: bool) -> Vec<ViewInput> {
        self.cameras
            .iter()
            .zip(&self.images)
            .zip(&self.gt)
            .map(|((c, i), g)| ViewInput { camera: c.clone(), image: i.clone(), labels: with_labels.then(|| g.labels.clone()), anchors: None })
            .collect()
    }

    pub fn visibility_masks(&self) -> Vec<Vec<bool>> {
        self.gt.iter().map(|g| g.visible.clone()).collect()
    }

    /// Metrics over pixels some other view also sees.
    pub fn score_visible(&self, est: &[DepthMap], thresholds: &[f64]) -> Result<Vec<Metrics>, SynthError> {
        score_masked(est, &self.gt_depth_maps(), &self.visibility_masks(), thresholds)
    }

    pub fn gt_depth_maps(&self) -> Vec<DepthMap> {
        self.gt.iter().map(GroundTruth::to_depth_map).collect()
    }

    /// Distance from `x` to the nearest surface.
    pub fn surface_distance(&self, x: &Vec3) -> f64 {
        self.surfaces.iter().map(|s| s.distance(x)).fold(f64::INFINITY, f64::min)
    }

    /// Writes images, label maps, ground truth and `scene.txt` into `dir`;
    /// returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, IoError> {
        let gt_dir = dir.join("gt");
        std::fs::create_dir_all(&gt_dir).map_err(|source| IoError::Io { path: gt_dir.clone(), source })?;
        let mut images = Vec::new();
        for (v, ((cam, img), gt)) in self.cameras.iter().zip(&self.images).zip(&self.gt).enumerate() {
            let name = format!("view_{v:03}.png");
            let labels = format!("labels_{v:03}.png");
            io::write_image_png(&dir.join(&name), img)?;
            io::write_label_png16(&dir.join(&labels), &gt.labels)?;
            io::write_depth_map(&io::depth_map_path(&gt_dir, v), &gt.to_depth_map())?;
            images.push(ImageEntry { path: name.into(), k: *cam.k(), r: *cam.rotation(), c: *cam.center(), labels: Some(labels.into()) });
        }
        let manifest = SceneManifest { base_dir: dir.into(), images, depth_range: self.depth_range, output: "out".into(), matches: None };
        let path = dir.join("scene.txt");
        std::fs::write(&path, manifest.to_text()).map_err(|source| IoError::Io { path: path.clone(), source })?;
        Ok(path)
    }
}

/// Metrics at one relative-depth threshold, in percent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub threshold: f64,
    pub accuracy: f64,
    pub completeness: f64,
    pub f1: f64,
}

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.005, 0.01, 0.02];

fn f1(a: f64, c: f64) -> f64 {
    if a + c > 0.0 {
        2.0 * a * c / (a + c)
    } else {
        0.0
    }
}

/// Accuracy (share of estimated pixels within the threshold), completeness
/// (share of ground-truth pixels with such an estimate) and F1 over all
/// views. Estimates count where the depth is positive and finite; ground
/// truth where the depth is positive.
pub fn score(est: &[DepthMap], gt: &[DepthMap], thresholds: &[f64]) -> Result<Vec<Metrics>, SynthError> {
    score_impl(est, gt, None, thresholds)
}

/// [`score`] restricted to pixels where `masks[view][pixel]` is set.
pub fn score_masked(est: &[DepthMap], gt: &[DepthMap], masks: &[Vec<bool>], thresholds: &[f64]) -> Result<Vec<Metrics>, SynthError> {
    if masks.len() != gt.len() {
        return Err(SynthError::ViewCount(gt.len(), masks.len()));
    }
    score_impl(est, gt, Some(masks), thresholds)
}

fn score_impl(est: &[DepthMap], gt: &[DepthMap], masks: Option<&[Vec<bool>]>, thresholds: &[f64]) -> Result<Vec<Metrics>, SynthError> {
    if est.len() != gt.len() {
        return Err(SynthError::ViewCount(gt.len(), est.len()));
    }
    for (v, (e, g)) in est.iter().zip(gt).enumerate() {
        if (e.width, e.height) != (g.width, g.height) {
            return Err(SynthError::DimensionMismatch((g.width, g.height), (e.width, e.height)));
        }
        if let Some(m) = masks.filter(|m| m[v].len() != g.depths.len()) {
            return Err(SynthError::DimensionMismatch((g.width, g.height), (m[v].len(), 1)));
        }
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let (mut n_est, mut n_gt, mut good) = (0usize, 0usize, 0usize);
            for (v, (e, g)) in est.iter().zip(gt).enumerate() {
                for (i, (&d, &d_gt)) in e.depths.iter().zip(&g.depths).enumerate() {
                    if !(d_gt > 0.0) || masks.is_some_and(|m| !m[v][i]) {
                        continue;
                    }
                    n_gt += 1;
                    if d > 0.0 && d.is_finite() {
                        n_est += 1;
                        if ((d - d_gt) / d_gt).abs() as f64 <= t {
                            good += 1;
                        }
                    }
                }
            }
            let pct = |n: usize, d: usize| if d == 0 { 0.0 } else { 100.0 * n as f64 / d as f64 };
            let (a, c) = (pct(good, n_est), pct(good, n_gt));
            Metrics { threshold: t, accuracy: a, completeness: c, f1: f1(a, c) }
        })
        .collect())
}

/// Pixels within `radius` (Chebyshev) of a ground-truth depth jump larger
/// than `rel_jump` between 4-neighbours.
pub fn discontinuity_band(gt: &GroundTruth, radius: usize, rel_jump: f64) -> Vec<bool> {
    let (w, h) = (gt.width, gt.height);
    let mut edge = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let jump = |j: usize| {
                let (a, b) = (gt.depth[i], gt.depth[j]);
                (a - b).abs() > rel_jump * a.min(b)
            };
            for j in [(x + 1 < w).then_some(i + 1), (y + 1 < h).then_some(i + w)].into_iter().flatten() {
                if jump(j) {
                    edge[i] = true;
                    edge[j] = true;
                }
            }
        }
    }
    let r = radius as i64;
    let mut band = vec![false; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let (a, b) = (x + dx, y + dy);
                    if a >= 0 && b >= 0 && a < w as i64 && b < h as i64 && edge[(b * w as i64 + a) as usize] {
                        band[(y * w as i64 + x) as usize] = true;
                        break 'scan;
                    }
                }
            }
        }
    }
    band
}
