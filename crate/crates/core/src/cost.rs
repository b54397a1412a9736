//! Matching cost terms: bilateral-weighted NCC over deformed windows, its
//! multi-scale mean, the Laplacian color term, the reprojection term and the
//! weighted aggregate.

use crate::geometry::{apply_homography, plane_homography, CameraModel, HypothesisMap, Mat3, Pixel, PlaneHypothesis};
use crate::imaging::ImageView;
use crate::segmentation::DeformedPatch;

/// Cost reported when NCC cannot be evaluated.
pub const SENTINEL_COST: f64 = 2.0;
const FLAT_VARIANCE: f64 = 1e-10;

/// Tunable parameters of the aggregated cost. Defaults are the published
/// parameter set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparameters {
    pub w_ms: f64,
    pub w_rp: f64,
    pub w_pc: f64,
    /// Truncation threshold of the color term.
    pub tau: f64,
    /// Base patch side length.
    pub patch_len: usize,
    /// Number of pyramid halvings.
    pub levels: usize,
    /// Refinement rounds per iteration.
    pub n_max: usize,
    /// Lower bound on each weight after an M-step.
    pub eta: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self { w_ms: 1.0, w_rp: 0.2, w_pc: 0.2, tau: 2.0, patch_len: 11, levels: 3, n_max: 3, eta: 0.1 }
    }
}

impl Hyperparameters {
    pub fn weights(&self) -> [f64; 3] {
        [self.w_ms, self.w_rp, self.w_pc]
    }

    pub fn set_weights(&mut self, w: [f64; 3]) {
        [self.w_ms, self.w_rp, self.w_pc] = w;
    }
}

/// `(C_ms, C_rp, C_pc)` for one hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostComponents {
    pub c_ms: f64,
    pub c_rp: f64,
    pub c_pc: f64,
}

impl CostComponents {
    pub fn new(c_ms: f64, c_rp: f64, c_pc: f64) -> Self {
        Self { c_ms, c_rp, c_pc }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.c_ms, self.c_rp, self.c_pc]
    }
}

/// Weighted sum of the three components.
#[inline]
pub fn aggregate(cc: &CostComponents, hp: &Hyperparameters) -> f64 {
    hp.w_ms * cc.c_ms + hp.w_rp * cc.c_rp + hp.w_pc * cc.c_pc
}

/// Bilateral weighting parameters and validity floor of the NCC.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NccParams {
    pub sigma_color: f64,
    pub sigma_spatial: f64,
    pub min_samples: usize,
}

impl Default for NccParams {
    fn default() -> Self {
        Self { sigma_color: 0.1, sigma_spatial: 5.5, min_samples: 9 }
    }
}

/// Weighted correlation of two sample vectors, `None` when a weight sum is
/// zero. Flat pairs correlate perfectly, a single flat side not at all
/// (`rho = -1`).
pub fn weighted_ncc(a: &[f64], b: &[f64], w: &[f64]) -> Option<f64> {
    let sw: f64 = w.iter().sum();
    if !(sw > 0.0) {
        return None;
    }
    let (mut ma, mut mb) = (0.0, 0.0);
    for i in 0..w.len() {
        ma += w[i] * a[i];
        mb += w[i] * b[i];
    }
    ma /= sw;
    mb /= sw;
    let (mut vab, mut vaa, mut vbb) = (0.0, 0.0, 0.0);
    for i in 0..w.len() {
        let (da, db) = (a[i] - ma, b[i] - mb);
        vab += w[i] * da * db;
        vaa += w[i] * da * da;
        vbb += w[i] * db * db;
    }
    Some(rho_from_moments(vab / sw, vaa / sw, vbb / sw))
}

#[inline]
fn rho_from_moments(vab: f64, vaa: f64, vbb: f64) -> f64 {
    match (vaa < FLAT_VARIANCE, vbb < FLAT_VARIANCE) {
        (true, true) => 1.0,
        (true, false) | (false, true) => -1.0,
        _ => (vab / (vaa * vbb).sqrt()).clamp(-1.0, 1.0),
    }
}

/// Homography of hypothesis `h` anchored at reference pixel `p`; `None` for
/// planes that do not face the reference camera.
pub fn hypothesis_homography(
    ref_cam: &CameraModel,
    src_cam: &CameraModel,
    p: &Pixel,
    h: &PlaneHypothesis,
) -> Option<Mat3> {
    let offset = h.plane_offset(ref_cam, p);
    (h.depth > 0.0 && offset < 0.0).then(|| plane_homography(ref_cam, src_cam, &h.normal, offset))
}

/// Reference side of one window: absolute sample coordinates, intensities
/// and bilateral weights, plus the nominal sample count (samples falling
/// outside the reference are dropped but still count as invalid).
fn ref_window(
    ref_img: ImageView<'_>,
    x: usize,
    y: usize,
    patch: &DeformedPatch,
    params: &NccParams,
    out: &mut Vec<[f32; 4]>,
) -> usize {
    let (w, h) = (ref_img.width as i64, ref_img.height as i64);
    let cx = (x as i64 + patch.shift.0 as i64).clamp(0, w - 1);
    let cy = (y as i64 + patch.shift.1 as i64).clamp(0, h - 1);
    let center = ref_img.at(cx as usize, cy as usize, 0) as f64;
    for &(dx, dy) in patch.samples() {
        let (qx, qy) = (x as i64 + dx as i64, y as i64 + dy as i64);
        if qx < 0 || qy < 0 || qx >= w || qy >= h {
            continue;
        }
        let a = ref_img.at(qx as usize, qy as usize, 0) as f64;
        let dist = (((qx - cx) * (qx - cx) + (qy - cy) * (qy - cy)) as f64).sqrt();
        let wt = (-(a - center).abs() / params.sigma_color - dist / params.sigma_spatial).exp();
        out.push([qx as f32, qy as f32, a as f32, wt as f32]);
    }
    patch.len()
}

fn ncc_from_window(samples: &[[f32; 4]], total: usize, src_img: ImageView<'_>, hom: &Mat3, min_samples: usize) -> f64 {
    let mut invalid = total - samples.len();
    let (mut sw, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let mut valid = 0usize;
    for &[qx, qy, a, wt] in samples {
        let Some(b) = apply_homography(hom, qx as f64, qy as f64).and_then(|s| src_img.bilinear_gray(s.x, s.y))
        else {
            invalid += 1;
            continue;
        };
        let (a, b, wt) = (a as f64, b as f64, wt as f64);
        sw += wt;
        sa += wt * a;
        sb += wt * b;
        saa += wt * a * a;
        sbb += wt * b * b;
        sab += wt * a * b;
        valid += 1;
    }
    if 2 * invalid > total || valid < min_samples || !(sw > 0.0) {
        return SENTINEL_COST;
    }
    let (ma, mb) = (sa / sw, sb / sw);
    let vaa = (saa / sw - ma * ma).max(0.0);
    let vbb = (sbb / sw - mb * mb).max(0.0);
    let vab = sab / sw - ma * mb;
    1.0 - rho_from_moments(vab, vaa, vbb)
}

/// `1 - rho` of the bilateral-weighted NCC between the deformed window of
/// reference pixel `(x, y)` and its plane-warped image in the source.
/// Both views are single-channel. Weights are taken relative to the shifted
/// window center. More than half the samples unmapped, or fewer than
/// `min_samples` usable, gives [`SENTINEL_COST`].
pub fn ncc_with_homography(
    ref_img: ImageView<'_>,
    src_img: ImageView<'_>,
    hom: &Mat3,
    x: usize,
    y: usize,
    patch: &DeformedPatch,
    params: &NccParams,
) -> f64 {
    let mut buf = Vec::with_capacity(patch.len());
    let total = ref_window(ref_img, x, y, patch, params, &mut buf);
    ncc_from_window(&buf, total, src_img, hom, params.min_samples)
}

/// Reference windows of every pixel of one image, so repeated NCC
/// evaluations only touch the source.
#[derive(Debug, Clone)]
pub struct WindowCache {
    width: usize,
    start: Vec<u32>,
    total: Vec<u16>,
    data: Vec<[f32; 4]>,
}

impl WindowCache {
    pub fn build<'p>(ref_img: ImageView<'_>, patch_at: impl Fn(usize, usize) -> &'p DeformedPatch, params: &NccParams) -> Self {
        let (w, h) = (ref_img.width, ref_img.height);
        let mut start = Vec::with_capacity(w * h + 1);
        let mut total = Vec::with_capacity(w * h);
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                start.push(data.len() as u32);
                total.push(ref_window(ref_img, x, y, patch_at(x, y), params, &mut data) as u16);
            }
        }
        start.push(data.len() as u32);
        Self { width: w, start, total, data }
    }

    /// Same value as [`ncc_with_homography`] for the cached window.
    #[inline]
    pub fn ncc(&self, x: usize, y: usize, src_img: ImageView<'_>, hom: &Mat3, min_samples: usize) -> f64 {
        let i = y * self.width + x;
        let s = &self.data[self.start[i] as usize..self.start[i + 1] as usize];
        ncc_from_window(s, self.total[i] as usize, src_img, hom, min_samples)
    }
}

/// [`ncc_with_homography`] with the homography built from `h` at pixel
/// `(x, y)`; invalid planes give the sentinel.
#[allow(clippy::too_many_arguments)]
pub fn ncc_deformed(
    ref_img: ImageView<'_>,
    src_img: ImageView<'_>,
    ref_cam: &CameraModel,
    src_cam: &CameraModel,
    x: usize,
    y: usize,
    h: &PlaneHypothesis,
    patch: &DeformedPatch,
    params: &NccParams,
) -> f64 {
    match hypothesis_homography(ref_cam, src_cam, &Pixel::new(x as f64, y as f64), h) {
        Some(hom) => ncc_with_homography(ref_img, src_img, &hom, x, y, patch, params),
        None => SENTINEL_COST,
    }
}

/// Mean of the valid per-level costs (sentinels excluded); the sentinel if
/// none is valid.
pub fn multi_scale_cost(costs: &[f64]) -> f64 {
    let (sum, n) = costs
        .iter()
        .filter(|&&c| c < SENTINEL_COST)
        .fold((0.0, 0usize), |(s, n), &c| (s + c, n + 1));
    if n == 0 {
        SENTINEL_COST
    } else {
        sum / n as f64
    }
}

/// How the color term treats the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PcMode {
    /// `max(diff, tau)`.
    #[default]
    Literal,
    /// `min(diff, tau_cap)`.
    Capped,
}

/// Norm of the Laplacian difference between `p_i` in the reference and
/// `p_j` in the source, floored (literal) or capped at the threshold. The
/// inputs are Laplacian images; an unmapped `p_j` gets the worst value of
/// the mode.
pub fn projection_color_error(
    ref_lap: ImageView<'_>,
    src_lap: ImageView<'_>,
    p_i: &Pixel,
    p_j: Option<&Pixel>,
    tau: f64,
    mode: PcMode,
) -> f64 {
    let worst = match mode {
        PcMode::Literal => 2.0 * tau,
        PcMode::Capped => tau,
    };
    let (Some(p_j), Ok(a)) = (p_j, ref_lap.sample_bilinear(p_i.x, p_i.y)) else {
        return worst;
    };
    let Ok(b) = src_lap.sample_bilinear(p_j.x, p_j.y) else {
        return worst;
    };
    let diff = a
        .iter()
        .zip(b.iter())
        .take(ref_lap.channels)
        .map(|(x, y)| ((y - x) as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    match mode {
        PcMode::Literal => diff.max(tau),
        PcMode::Capped => diff.min(tau),
    }
}

/// Forward-backward reprojection distance of `p` through hypothesis `h` and
/// the source's current planes, truncated at `tau_rp`.
pub fn reprojection_error(
    ref_cam: &CameraModel,
    src_cam: &CameraModel,
    p: &Pixel,
    h: &PlaneHypothesis,
    src_planes: &HypothesisMap,
    tau_rp: f64,
) -> f64 {
    let Ok(world) = ref_cam.unproject(p, h.depth) else {
        return tau_rp;
    };
    let Ok(q) = src_cam.project(&world) else {
        return tau_rp;
    };
    let Some(d_src) = src_planes.depth_at(src_cam, &q.pixel) else {
        return tau_rp;
    };
    let Ok(back_world) = src_cam.unproject(&q.pixel, d_src) else {
        return tau_rp;
    };
    let Ok(back) = ref_cam.project(&back_world) else {
        return tau_rp;
    };
    let e = (back.pixel - p).norm();
    if e.is_finite() {
        e.min(tau_rp)
    } else {
        tau_rp
    }
}

/// Combines per-source components: sources are ranked by aggregated cost and
/// the best `top_k` averaged. Sources whose matching cost is the invalid
/// sentinel only fill in when no source is valid. Returns the mean aggregate
/// and the matching mean components. Ties keep source order.
pub fn combine_sources(per_source: &[CostComponents], hp: &Hyperparameters, top_k: usize) -> (f64, CostComponents) {
    let mut ranked: Vec<(f64, usize)> = per_source.iter().enumerate().map(|(i, c)| (aggregate(c, hp), i)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let valid = per_source.iter().filter(|c| c.c_ms < SENTINEL_COST).count();
    let n = top_k.clamp(1, ranked.len().max(1)).min(valid.max(1)).min(ranked.len());
    if n == 0 {
        let worst = CostComponents::new(SENTINEL_COST, 0.0, 0.0);
        return (aggregate(&worst, hp), worst);
    }
    let mut mean = CostComponents::default();
    let mut ag = 0.0;
    for &(a, i) in &ranked[..n] {
        ag += a;
        mean.c_ms += per_source[i].c_ms;
        mean.c_rp += per_source[i].c_rp;
        mean.c_pc += per_source[i].c_pc;
    }
    let nf = n as f64;
    (ag / nf, CostComponents::new(mean.c_ms / nf, mean.c_rp / nf, mean.c_pc / nf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{look_at, Vec3};
    use crate::imaging::{laplacian_image, ImageGrid};
    use crate::segmentation::{deform_patch, Distances};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(center: Vec3) -> CameraModel {
        let k = Mat3::new(100.0, 0.0, 31.5, 0.0, 100.0, 23.5, 0.0, 0.0, 1.0);
        CameraModel::new(k, look_at(&center, &Vec3::new(0.0, 0.0, 3.0)), center, 64, 48).unwrap()
    }

    fn noise(w: usize, h: usize, seed: u64) -> ImageGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageGrid::from_fn(w, h, 1, |_, _, _| rng.random::<f32>())
    }

    #[test]
    fn self_correlation_is_zero_cost() {
        let img = noise(64, 48, 1);
        let c = cam(Vec3::zeros());
        let patch = deform_patch(Distances::uniform(10), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), -1.0).normalize();
            let h = PlaneHypothesis::new(rng.random_range(1.0..5.0), n);
            let cost = ncc_deformed(img.view(), img.view(), &c, &c, 30, 20, &h, &patch, &NccParams::default());
            assert!(cost.abs() < 1e-9, "{cost}");
        }
    }

    #[test]
    fn negated_contrast_is_maximal_cost() {
        let img = noise(64, 48, 3);
        let neg = ImageGrid::from_fn(64, 48, 1, |x, y, _| 1.0 - img.get(x, y, 0));
        let c = cam(Vec3::zeros());
        let patch = deform_patch(Distances::uniform(10), 11).unwrap();
        let h = PlaneHypothesis::new(2.0, Vec3::new(0.0, 0.0, -1.0));
        let cost = ncc_deformed(img.view(), neg.view(), &c, &c, 30, 20, &h, &patch, &NccParams::default());
        assert!((cost - 2.0).abs() < 1e-9);
    }

    #[test]
    fn mostly_outside_source_gives_sentinel() {
        let img = noise(64, 48, 4);
        let c = cam(Vec3::zeros());
        let patch = deform_patch(Distances::uniform(10), 11).unwrap();
        let h = PlaneHypothesis::new(2.0, Vec3::new(0.0, 0.0, -1.0));
        let cost = ncc_deformed(img.view(), img.view(), &c, &c, 0, 0, &h, &patch, &NccParams::default());
        assert_eq!(cost, SENTINEL_COST);
    }

    #[test]
    fn running_moments_match_explicit_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ref_img = noise(64, 48, 6);
        let src_img = noise(64, 48, 7);
        let a = cam(Vec3::zeros());
        let b = cam(Vec3::new(0.2, 0.0, 0.0));
        let params = NccParams { sigma_color: 0.2, sigma_spatial: 4.0, min_samples: 9 };
        for _ in 0..200 {
            let d = Distances::new(rng.random_range(0..20), rng.random_range(0..20), rng.random_range(0..20), rng.random_range(1..20));
            let patch = deform_patch(d, 11).unwrap();
            let (x, y) = (rng.random_range(12..52usize), rng.random_range(12..36usize));
            let h = PlaneHypothesis::new(3.0, Vec3::new(0.0, 0.0, -1.0));
            let p = Pixel::new(x as f64, y as f64);
            let hom = hypothesis_homography(&a, &b, &p, &h).unwrap();
            let got = ncc_with_homography(ref_img.view(), src_img.view(), &hom, x, y, &patch, &params);
            let (cx, cy) = (x as i64 + patch.shift.0 as i64, y as i64 + patch.shift.1 as i64);
            let center = ref_img.get(cx as usize, cy as usize, 0) as f64;
            let (mut va, mut vb, mut vw) = (vec![], vec![], vec![]);
            for &(dx, dy) in patch.samples() {
                let (qx, qy) = (x as i64 + dx as i64, y as i64 + dy as i64);
                let s = apply_homography(&hom, qx as f64, qy as f64).unwrap();
                let Some(sv) = src_img.view().bilinear_gray(s.x, s.y) else { continue };
                let av = ref_img.get(qx as usize, qy as usize, 0) as f64;
                let dist = (((qx - cx).pow(2) + (qy - cy).pow(2)) as f64).sqrt();
                va.push(av);
                vb.push(sv as f64);
                vw.push((-(av - center).abs() / 0.2 - dist / 4.0).exp());
            }
            if va.len() < 9 || 2 * (patch.len() - va.len()) > patch.len() {
                assert_eq!(got, SENTINEL_COST);
                continue;
            }
            let expect = 1.0 - weighted_ncc(&va, &vb, &vw).unwrap();
            assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
        }
    }

    #[test]
    fn multi_scale_mean() {
        assert!((multi_scale_cost(&[0.2, 0.4, 0.6]) - 0.4).abs() < 1e-15);
        assert_eq!(multi_scale_cost(&[0.3, SENTINEL_COST, SENTINEL_COST]), 0.3);
        assert_eq!(multi_scale_cost(&[SENTINEL_COST]), SENTINEL_COST);
    }

    #[test]
    fn color_term_modes() {
        let img = ImageGrid::from_fn(16, 16, 3, |x, y, c| ((x * 7 + y * 3 + c) % 5) as f32 / 5.0);
        let lap = laplacian_image(img.view());
        let p = Pixel::new(5.0, 6.0);
        assert_eq!(projection_color_error(lap.view(), lap.view(), &p, Some(&p), 2.0, PcMode::Literal), 2.0);
        assert_eq!(projection_color_error(lap.view(), lap.view(), &p, Some(&p), 2.0, PcMode::Capped), 0.0);
        // difference of norm 5 via a constant offset of 5/sqrt(3) per channel
        let shifted = ImageGrid::from_fn(16, 16, 3, |x, y, c| lap.get(x, y, c) + 5.0 / 3f32.sqrt());
        let v = projection_color_error(lap.view(), shifted.view(), &p, Some(&p), 2.0, PcMode::Literal);
        assert!((v - 5.0).abs() < 1e-5);
        let v = projection_color_error(lap.view(), shifted.view(), &p, Some(&p), 2.0, PcMode::Capped);
        assert_eq!(v, 2.0);
        assert_eq!(projection_color_error(lap.view(), lap.view(), &p, None, 2.0, PcMode::Literal), 4.0);
    }

    #[test]
    fn reprojection_fixed_point_and_truncation() {
        let a = cam(Vec3::zeros());
        let b = cam(Vec3::new(0.25, 0.05, 0.0));
        // fronto-parallel plane z = 3 in world = both cameras look at it
        let n_world = Vec3::new(0.0, 0.0, -1.0);
        let gt = |c: &CameraModel| {
            let mut m = HypothesisMap::filled(64, 48, PlaneHypothesis::new(1.0, Vec3::new(0.0, 0.0, -1.0)));
            let n = c.rotation() * n_world;
            for y in 0..48 {
                for x in 0..64 {
                    let p = Pixel::new(x as f64, y as f64);
                    let ray_w = c.rotation().transpose() * c.ray(&p);
                    let t = (3.0 - c.center().z) / ray_w.z;
                    m.set(x, y, PlaneHypothesis::new(t, n));
                }
            }
            m
        };
        let (ga, gb) = (gt(&a), gt(&b));
        for y in (5..40).step_by(5) {
            for x in (5..55).step_by(7) {
                let p = Pixel::new(x as f64, y as f64);
                let e = reprojection_error(&a, &b, &p, ga.get(x, y), &gb, 2.0);
                assert!(e < 1e-3, "{e}");
            }
        }
        let mut far = gb.clone();
        for h in far.data.iter_mut() {
            h.depth *= 1.5;
        }
        let p = Pixel::new(30.0, 20.0);
        assert_eq!(reprojection_error(&a, &b, &p, ga.get(30, 20), &far, 2.0), 2.0);
    }

    #[test]
    fn aggregate_uses_published_weights() {
        let hp = Hyperparameters::default();
        let v = aggregate(&CostComponents::new(0.5, 1.0, 2.0), &hp);
        assert!((v - 1.1).abs() < 1e-12);
        assert_eq!(aggregate(&CostComponents::default(), &hp), 0.0);
    }

    #[test]
    fn top_k_combination() {
        let hp = Hyperparameters::default();
        let cs = [CostComponents::new(0.9, 0.0, 2.0), CostComponents::new(0.1, 0.0, 2.0), CostComponents::new(0.3, 0.0, 2.0)];
        let (ag, mean) = combine_sources(&cs, &hp, 2);
        assert!((mean.c_ms - 0.2).abs() < 1e-12);
        assert!((ag - (0.2 + 0.4)).abs() < 1e-12);
        let cs = [CostComponents::new(SENTINEL_COST, 0.0, 2.0), CostComponents::new(0.1, 0.0, 2.0)];
        let (_, mean) = combine_sources(&cs, &hp, 2);
        assert_eq!(mean.c_ms, 0.1);
        let cs = [CostComponents::new(SENTINEL_COST, 0.0, 4.0); 2];
        let (_, mean) = combine_sources(&cs, &hp, 2);
        assert_eq!(mean.c_ms, SENTINEL_COST);
    }
}
