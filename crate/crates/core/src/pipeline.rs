//! Reconstruction driver: per-view multi-scale state, checkerboard
//! propagation and refinement sweeps, EM weight updates, and consistency
//! fusion of the final depth maps.

use crate::config::{Config, PropStyle};
use crate::cost::{
    combine_sources, multi_scale_cost, projection_color_error, reprojection_error, CostComponents, Hyperparameters,
    WindowCache, SENTINEL_COST,
};
use crate::emopt::{accept_weights, barrier_schedule, collect_anchor_costs, detect_anchors, m_step, AnchorSet, EmError};
use crate::geometry::{
    apply_homography, depth_edge_consistency, relative_pose, CameraModel, GeometryError, HypothesisMap, Mat3, Pixel,
    PlaneHypothesis, Vec3,
};
use crate::imaging::{build_pyramid, laplacian_image, ImageGrid, ImagingError, ScalePyramid};
use crate::propagation::{checkerboard_schedule, evaluate_and_commit, propagate_pixel, LevelQuery, LevelState};
use crate::refinement::{
    descend_frame, descend_frame_raw, random_facing_normal, refine_proposals, RefineMode, RefineSettings, TangentFrame,
};
use crate::segmentation::{
    acm_pattern, acm_patch, boundary_distances, deform_patch_at, depth_interval, fallback_segment, pattern_dims,
    propagation_pattern, BoundaryDistances, DeformedPatch, Distances, FallbackParams, InstanceLabelMap,
    PropagationPattern,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("need at least two views, got {0}")]
    TooFewViews(usize),
    #[error("invalid depth range [{0}, {1}]")]
    BadRange(f64, f64),
    #[error("view {view}: camera is {camera:?} but image is {image:?}")]
    CameraDims { view: usize, camera: (usize, usize), image: (usize, usize) },
    #[error("view {view}: label map is {labels:?} but image is {image:?}")]
    LabelDims { view: usize, labels: (usize, usize), image: (usize, usize) },
    #[error("view {view}: {source}")]
    Imaging { view: usize, source: ImagingError },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("view index {0} out of range")]
    NoSuchView(usize),
}

/// One calibrated input image with optional segmentation and matches.
#[derive(Debug, Clone)]
pub struct ViewInput {
    pub camera: CameraModel,
    pub image: ImageGrid,
    /// Level-0 instance labels; the built-in segmenter runs when absent.
    pub labels: Option<InstanceLabelMap>,
    /// Feature correspondences for EM; detected when absent.
    pub anchors: Option<AnchorSet>,
}

/// Final per-view maps in the view's camera frame. Depth 0 marks pixels
/// without an estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depths: Vec<f32>,
    pub normals: Vec<[f32; 3]>,
    pub costs: Vec<f32>,
}

impl DepthMap {
    pub fn from_hypotheses(map: &HypothesisMap, costs: &[f64]) -> Self {
        Self {
            width: map.width,
            height: map.height,
            depths: map.data.iter().map(|h| h.depth as f32).collect(),
            normals: map.data.iter().map(|h| [h.normal.x as f32, h.normal.y as f32, h.normal.z as f32]).collect(),
            costs: costs.iter().map(|&c| c as f32).collect(),
        }
    }

    pub fn hypothesis(&self, x: usize, y: usize) -> PlaneHypothesis {
        let i = y * self.width + x;
        let n = self.normals[i];
        PlaneHypothesis::new(self.depths[i] as f64, Vec3::new(n[0] as f64, n[1] as f64, n[2] as f64))
    }
}

struct LevelData {
    cam: CameraModel,
    lap: ImageGrid,
    labels: InstanceLabelMap,
    dist: BoundaryDistances,
    /// Deformed windows; these also bound the refinement depth interval.
    patches: Vec<DeformedPatch>,
    window: WindowCache,
    parity: [Vec<(usize, usize)>; 2],
}

struct ViewData {
    gray: ScalePyramid,
    levels: Vec<LevelData>,
    anchors: AnchorSet,
}

/// Committed state of one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelMaps {
    pub hypotheses: HypothesisMap,
    pub costs: Vec<f64>,
    frames: Vec<Option<TangentFrame>>,
}

/// Mutable per-view state: the per-level maps plus the view's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewState {
    pub levels: Vec<LevelMaps>,
    pub hyper: Hyperparameters,
    /// Whether the view finished at least one turn (its maps feed `C_rp`).
    pub estimated: bool,
    pub iteration: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Propagation { sweep: usize, parity: usize },
    Refinement { round: usize, parity: usize },
}

/// Per-level cost maps around one sweep, handed to observers.
pub struct SweepRecord<'a> {
    pub view: usize,
    pub iteration: usize,
    pub kind: SweepKind,
    pub before: &'a [Vec<f64>],
    pub after: &'a [Vec<f64>],
}

/// Summary of one view's turn in one outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    pub iteration: usize,
    pub view: usize,
    /// Mean level-0 cost after rescoring under the turn's weights.
    pub mean_cost_start: f64,
    pub mean_cost_end: f64,
    pub updates: usize,
    pub weights: [f64; 3],
    /// Anchor count used by the M-step, `None` when EM was skipped.
    pub em_anchors: Option<usize>,
}

const STAGE_INIT: u64 = 1;
const STAGE_REFINE: u64 = 2;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream per (view, level, pixel, iteration, stage) so results
/// do not depend on the worker count.
fn pixel_rng(seed: u64, parts: [u64; 5]) -> ChaCha8Rng {
    let mut s = splitmix(seed);
    for p in parts {
        s = splitmix(s ^ p);
    }
    ChaCha8Rng::seed_from_u64(s)
}

/// Position at level `to` of the pixel `(x, y)` of level `from`.
fn map_pixel(x: usize, y: usize, from: usize, to: usize, w: usize, h: usize) -> (usize, usize) {
    let s = (1u64 << from) as f64 / (1u64 << to) as f64;
    let f = |v: usize, n: usize| (((v as f64 + 0.5) * s - 0.5).round().max(0.0) as usize).min(n - 1);
    (f(x, w), f(y, h))
}

struct Update {
    idx: usize,
    hyp: Option<(PlaneHypothesis, f64)>,
    frame: Option<Option<TangentFrame>>,
}

struct Source<'a> {
    idx: usize,
    r_rel: Mat3,
    t_rel: Vec3,
    planes: Option<&'a [LevelMaps]>,
}

/// Cost of hypotheses for one reference view against frozen sources.
struct Evaluator<'a> {
    data: &'a [ViewData],
    view: usize,
    sources: Vec<Source<'a>>,
    hp: Hyperparameters,
    cfg: &'a Config,
    range: (f64, f64),
}

impl Evaluator<'_> {
    fn worst(&self) -> f64 {
        let pc = match self.cfg.pc_mode {
            crate::cost::PcMode::Literal => 2.0 * self.hp.tau,
            crate::cost::PcMode::Capped => self.hp.tau,
        };
        self.hp.w_ms * SENTINEL_COST + self.hp.w_rp * self.cfg.tau_rp + self.hp.w_pc * pc
    }

    fn homography(&self, level: usize, src: &Source<'_>, n: &Vec3, offset: f64) -> Mat3 {
        let r = &self.data[self.view].levels[level].cam;
        let s = &self.data[src.idx].levels[level].cam;
        s.k() * (src.r_rel + src.t_rel * n.transpose() / offset) * r.k_inv()
    }

    fn evaluate(&self, level: usize, x: usize, y: usize, h: &PlaneHypothesis) -> Option<(f64, CostComponents)> {
        let vd = &self.data[self.view];
        let ld = &vd.levels[level];
        let p = Pixel::new(x as f64, y as f64);
        let offset = h.normal.dot(&ld.cam.ray(&p)) * h.depth;
        if !(h.depth > 0.0 && offset < 0.0) {
            return None;
        }
        let top = if self.cfg.ablation.multi_scale_cost() { vd.levels.len() - 1 } else { level };
        let mut per_source = Vec::with_capacity(self.sources.len());
        let mut level_costs = [0.0; 8];
        for src in &self.sources {
            let sd = &self.data[src.idx];
            let mut hom_here = Mat3::zeros();
            for m in level..=top {
                let hom = self.homography(m, src, &h.normal, offset);
                let (w, hh) = (vd.levels[m].cam.width(), vd.levels[m].cam.height());
                let (xm, ym) = map_pixel(x, y, level, m, w, hh);
                level_costs[m - level] = vd.levels[m].window.ncc(xm, ym, sd.gray.level(m), &hom, self.cfg.ncc.min_samples);
                if m == level {
                    hom_here = hom;
                }
            }
            let c_ms = multi_scale_cost(&level_costs[..=top - level]);
            let p_j = apply_homography(&hom_here, p.x, p.y);
            let c_pc = projection_color_error(
                ld.lap.view(),
                sd.levels[level].lap.view(),
                &p,
                p_j.as_ref(),
                self.hp.tau,
                self.cfg.pc_mode,
            );
            let c_rp = match src.planes {
                Some(pl) => reprojection_error(&ld.cam, &sd.levels[level].cam, &p, h, &pl[level].hypotheses, self.cfg.tau_rp),
                None => self.cfg.tau_rp,
            };
            per_source.push(CostComponents::new(c_ms, c_rp, c_pc));
        }
        Some(combine_sources(&per_source, &self.hp, self.cfg.top_k_sources))
    }

    fn cost(&self, level: usize, x: usize, y: usize, h: &PlaneHypothesis) -> f64 {
        self.evaluate(level, x, y, h).map_or_else(|| self.worst(), |r| r.0)
    }

    /// The plane of `h` (held by pixel `q` of level `from`) re-anchored on
    /// the ray of pixel `p` of level `to`.
    fn reanchor(&self, h: &PlaneHypothesis, from: usize, q: (usize, usize), to: usize, p: (usize, usize)) -> Option<PlaneHypothesis> {
        let levels = &self.data[self.view].levels;
        let qp = Pixel::new(q.0 as f64, q.1 as f64);
        let offset = h.plane_offset(&levels[from].cam, &qp);
        let pp = Pixel::new(p.0 as f64, p.1 as f64);
        let d = PlaneHypothesis::depth_on_plane(&h.normal, offset, &levels[to].cam, &pp)?;
        (offset < 0.0 && d >= self.range.0 && d <= self.range.1).then(|| PlaneHypothesis::new(d, h.normal))
    }
}

/// Multi-view reconstruction over a fixed set of views.
pub struct Reconstruction {
    cfg: Config,
    range: (f64, f64),
    cameras: Vec<CameraModel>,
    images: Vec<ImageGrid>,
    data: Vec<ViewData>,
    states: Vec<ViewState>,
    stats: Vec<IterationStats>,
    fixed_pattern: PropagationPattern,
    undeformed_pattern: PropagationPattern,
}

impl Reconstruction {
    /// Builds pyramids, label and patch caches, detects anchors when EM is
    /// enabled, and randomly initializes every level.
    pub fn new(views: Vec<ViewInput>, depth_range: (f64, f64), cfg: Config) -> Result<Self, PipelineError> {
        if views.len() < 2 {
            return Err(PipelineError::TooFewViews(views.len()));
        }
        let (lo, hi) = depth_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(PipelineError::BadRange(lo, hi));
        }
        let k = cfg.hyper.levels;
        let mut data = Vec::with_capacity(views.len());
        for (v, input) in views.iter().enumerate() {
            let (w, h) = (input.image.width(), input.image.height());
            if (input.camera.width(), input.camera.height()) != (w, h) {
                return Err(PipelineError::CameraDims { view: v, camera: (input.camera.width(), input.camera.height()), image: (w, h) });
            }
            if let Some(l) = &input.labels {
                if (l.width(), l.height()) != (w, h) {
                    return Err(PipelineError::LabelDims { view: v, labels: (l.width(), l.height()), image: (w, h) });
                }
            }
            data.push(build_view(input, &cfg).map_err(|e| match e {
                BuildError::Imaging(source) => PipelineError::Imaging { view: v, source },
                BuildError::Geometry(g) => PipelineError::Geometry(g),
            })?);
            debug_assert_eq!(data[v].levels.len(), k + 1);
        }
        if cfg.ablation.em() {
            let grays: Vec<_> = data.iter().map(|d| d.gray.level(0)).collect();
            let detected: Vec<Option<AnchorSet>> = views
                .par_iter()
                .enumerate()
                .map(|(v, input)| {
                    input.anchors.is_none().then(|| {
                        let others: Vec<_> = grays.iter().enumerate().filter(|(s, _)| *s != v).map(|(s, g)| (s, *g)).collect();
                        detect_anchors(grays[v], &others, cfg.max_corners)
                    })
                })
                .collect();
            for (d, a) in data.iter_mut().zip(detected) {
                if let Some(a) = a {
                    d.anchors = a;
                }
            }
        }
        let cameras = views.iter().map(|v| v.camera.clone()).collect();
        let images = views.into_iter().map(|v| v.image).collect();
        let l = cfg.hyper.patch_len as f64;
        let _ = l;
        let half = cfg.prop_length / 2.0;
        let mut rec = Self {
            range: depth_range,
            cameras,
            images,
            data,
            states: Vec::new(),
            stats: Vec::new(),
            fixed_pattern: acm_pattern(),
            undeformed_pattern: propagation_pattern(Distances::uniform(1), half, half),
            cfg,
        };
        rec.initialize();
        Ok(rec)
    }

    /// Random hypotheses on every level, then one cost evaluation.
    fn initialize(&mut self) {
        let (lo, hi) = self.range;
        let seed = self.cfg.seed;
        let mut states = Vec::with_capacity(self.data.len());
        for (v, vd) in self.data.iter().enumerate() {
            let levels = vd
                .levels
                .iter()
                .enumerate()
                .map(|(l, ld)| {
                    let (w, h) = (ld.cam.width(), ld.cam.height());
                    let data: Vec<PlaneHypothesis> = (0..w * h)
                        .into_par_iter()
                        .map(|i| {
                            let mut rng = pixel_rng(seed, [v as u64, l as u64, i as u64, 0, STAGE_INIT]);
                            let ray = ld.cam.ray(&Pixel::new((i % w) as f64, (i / w) as f64));
                            let d = if lo < hi { rng.random_range(lo..=hi) } else { lo };
                            PlaneHypothesis::new(d, random_facing_normal(&ray, &mut rng))
                        })
                        .collect();
                    LevelMaps { hypotheses: HypothesisMap { width: w, height: h, data }, costs: vec![0.0; w * h], frames: vec![None; w * h] }
                })
                .collect();
            states.push(ViewState { levels, hyper: self.cfg.hyper, estimated: false, iteration: 0 });
        }
        self.states = states;
        for v in 0..self.data.len() {
            self.rescore(v);
        }
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn view_count(&self) -> usize {
        self.data.len()
    }

    pub fn depth_range(&self) -> (f64, f64) {
        self.range
    }

    pub fn camera(&self, view: usize) -> &CameraModel {
        &self.cameras[view]
    }

    pub fn image(&self, view: usize) -> &ImageGrid {
        &self.images[view]
    }

    pub fn state(&self, view: usize) -> &ViewState {
        &self.states[view]
    }

    pub fn labels(&self, view: usize, level: usize) -> &InstanceLabelMap {
        &self.data[view].levels[level].labels
    }

    pub fn anchors(&self, view: usize) -> &AnchorSet {
        &self.data[view].anchors
    }

    /// Pyramid levels per view (`k + 1`).
    pub fn level_count(&self) -> usize {
        self.data[0].levels.len()
    }

    pub fn level_camera(&self, view: usize, level: usize) -> &CameraModel {
        &self.data[view].levels[level].cam
    }

    pub fn stats(&self) -> &[IterationStats] {
        &self.stats
    }

    pub fn weights(&self, view: usize) -> [f64; 3] {
        self.states[view].hyper.weights()
    }

    /// Final level-0 maps of `view`.
    pub fn depth_map(&self, view: usize) -> DepthMap {
        let l0 = &self.states[view].levels[0];
        DepthMap::from_hypotheses(&l0.hypotheses, &l0.costs)
    }

    pub fn depth_maps(&self) -> Vec<DepthMap> {
        (0..self.data.len()).map(|v| self.depth_map(v)).collect()
    }

    fn evaluator(&self, view: usize) -> Evaluator<'_> {
        let sources = (0..self.data.len())
            .filter(|&s| s != view)
            .map(|s| {
                let (r_rel, t_rel) = relative_pose(&self.cameras[view], &self.cameras[s]);
                let planes = self.states[s].estimated.then(|| self.states[s].levels.as_slice());
                Source { idx: s, r_rel, t_rel, planes }
            })
            .collect();
        Evaluator { data: &self.data, view, sources, hp: self.states[view].hyper, cfg: &self.cfg, range: self.range }
    }

    /// Aggregated cost and components of `h` at pixel `(x, y)` of `level`
    /// under the view's current weights and sources.
    pub fn evaluate(&self, view: usize, level: usize, x: usize, y: usize, h: &PlaneHypothesis) -> Option<(f64, CostComponents)> {
        self.evaluator(view).evaluate(level, x, y, h)
    }

    /// Overwrites one hypothesis and refreshes its cost.
    pub fn set_hypothesis(&mut self, view: usize, level: usize, x: usize, y: usize, h: PlaneHypothesis) {
        let c = self.evaluator(view).cost(level, x, y, &h);
        let lm = &mut self.states[view].levels[level];
        let i = y * lm.hypotheses.width + x;
        lm.hypotheses.data[i] = h;
        lm.costs[i] = c;
        lm.frames[i] = None;
    }

    /// Marks a view's maps as usable (or not) for the reprojection term.
    pub fn set_estimated(&mut self, view: usize, estimated: bool) {
        self.states[view].estimated = estimated;
    }

    /// Re-evaluates every stored cost under the current weights and sources.
    pub fn rescore(&mut self, view: usize) {
        let fresh: Vec<Vec<f64>> = {
            let ev = self.evaluator(view);
            self.states[view]
                .levels
                .iter()
                .enumerate()
                .map(|(l, lm)| {
                    let w = lm.hypotheses.width;
                    lm.hypotheses.data.par_iter().enumerate().map(|(i, h)| ev.cost(l, i % w, i / w, h)).collect()
                })
                .collect()
        };
        for (lm, c) in self.states[view].levels.iter_mut().zip(fresh) {
            lm.costs = c;
        }
    }

    fn pattern_at(&self, view: usize, level: usize, x: usize, y: usize) -> std::borrow::Cow<'_, PropagationPattern> {
        use std::borrow::Cow;
        match self.cfg.ablation.prop_style() {
            PropStyle::Fixed => Cow::Borrowed(&self.fixed_pattern),
            PropStyle::Undeformed => Cow::Borrowed(&self.undeformed_pattern),
            PropStyle::Deformed => {
                let d = self.data[view].levels[level].dist.at(x, y);
                let (lh, lv) = pattern_dims(d, self.cfg.prop_length);
                Cow::Owned(propagation_pattern(d, lh, lv))
            }
        }
    }

    fn apply(&mut self, view: usize, updates: Vec<Vec<Update>>) -> usize {
        let mut n = 0;
        for (lm, ups) in self.states[view].levels.iter_mut().zip(updates) {
            for u in ups {
                if let Some((h, c)) = u.hyp {
                    lm.hypotheses.data[u.idx] = h;
                    lm.costs[u.idx] = c;
                    n += 1;
                }
                if let Some(f) = u.frame {
                    lm.frames[u.idx] = f;
                }
            }
        }
        n
    }

    /// One propagation pass over pixels of `parity` on every level. Reads
    /// only the state from before the pass; returns the number of commits.
    pub fn propagation_sweep(&mut self, view: usize, parity: usize) -> usize {
        let updates: Vec<Vec<Update>> = {
            let ev = self.evaluator(view);
            let snap = &self.states[view].levels;
            let k = snap.len() - 1;
            let multi = self.cfg.ablation.multi_scale_prop();
            (0..=k)
                .map(|l| {
                    let ld = &self.data[view].levels[l];
                    ld.parity[parity]
                        .par_iter()
                        .filter_map(|&(x, y)| {
                            let w = ld.cam.width();
                            let idx = y * w + x;
                            let levels: Vec<usize> = if multi { (0..=k).collect() } else { vec![l] };
                            let centers: Vec<(usize, usize)> = levels
                                .iter()
                                .map(|&m| {
                                    let c = &self.data[view].levels[m].cam;
                                    map_pixel(x, y, l, m, c.width(), c.height())
                                })
                                .collect();
                            let patterns: Vec<_> = levels.iter().zip(&centers).map(|(&m, c)| self.pattern_at(view, m, c.0, c.1)).collect();
                            let queries: Vec<LevelQuery<'_>> = levels
                                .iter()
                                .zip(&centers)
                                .zip(&patterns)
                                .map(|((&m, &center), pat)| LevelQuery {
                                    level: m,
                                    state: LevelState {
                                        width: snap[m].hypotheses.width,
                                        height: snap[m].hypotheses.height,
                                        hypotheses: &snap[m].hypotheses.data,
                                        costs: &snap[m].costs,
                                    },
                                    center,
                                    pattern: pat.as_ref(),
                                })
                                .collect();
                            let cands = propagate_pixel(&queries);
                            let proposals = cands.entries.iter().filter_map(|c| ev.reanchor(&c.hypothesis, c.level, c.position, l, (x, y)));
                            let (_, h, c, _) = evaluate_and_commit(snap[l].costs[idx], proposals, |h| ev.evaluate(l, x, y, h))?;
                            Some(Update { idx, hyp: Some((h, c)), frame: Some(None) })
                        })
                        .collect()
                })
                .collect()
        };
        self.apply(view, updates)
    }

    /// One refinement round over pixels of `parity` on every level.
    pub fn refinement_sweep(&mut self, view: usize, parity: usize, round: usize) -> usize {
        let settings = RefineSettings {
            mode: self.cfg.ablation.refine_mode(),
            full_rodrigues: self.cfg.full_rodrigues,
            raw_descent: self.cfg.raw_descent,
            depth_range: self.range,
        };
        if settings.mode == RefineMode::Off {
            return 0;
        }
        let iteration = self.states[view].iteration as u64;
        let n_max = self.cfg.hyper.n_max;
        let updates: Vec<Vec<Update>> = {
            let ev = self.evaluator(view);
            let snap = &self.states[view].levels;
            let k = snap.len() - 1;
            (0..=k)
                .map(|l| {
                    let ld = &self.data[view].levels[l];
                    let w = ld.cam.width();
                    // interval taken from a coarser level early on
                    let m = n_max.saturating_sub(round).clamp(l, k);
                    let lm_data = &self.data[view].levels[m];
                    ld.parity[parity]
                        .par_iter()
                        .map(|&(x, y)| {
                            let idx = y * w + x;
                            let mut rng = pixel_rng(self.cfg.seed, [view as u64, l as u64, idx as u64, iteration, STAGE_REFINE + 16 * round as u64]);
                            let h = snap[l].hypotheses.data[idx];
                            let frame = match snap[l].frames[idx] {
                                Some(f) if f.is_valid_for(&h.normal) => f,
                                _ => TangentFrame::random(&h.normal, &mut rng),
                            };
                            let (mw, mh) = (lm_data.cam.width(), lm_data.cam.height());
                            let (xm, ym) = map_pixel(x, y, l, m, mw, mh);
                            let interval = depth_interval(&lm_data.patches[ym * mw + xm], xm, ym, mw, mh, |sx, sy| snap[m].hypotheses.get(sx, sy).depth, self.range)
                                .unwrap_or((h.depth, h.depth));
                            let ray = ld.cam.ray(&Pixel::new(x as f64, y as f64));
                            let proposals = refine_proposals(&h, &frame, interval, round, n_max, &ray, &settings, &mut rng);
                            let best = evaluate_and_commit(snap[l].costs[idx], proposals, |p| ev.evaluate(l, x, y, p));
                            let next_frame = match &best {
                                Some((_, nh, _, _)) if nh.normal != h.normal => {
                                    let f = if settings.raw_descent { descend_frame_raw(&h.normal, &nh.normal) } else { descend_frame(&h.normal, &nh.normal) };
                                    Some(f.unwrap_or_else(|_| TangentFrame::random(&nh.normal, &mut rng)))
                                }
                                _ => Some(TangentFrame::random(&h.normal, &mut rng)),
                            };
                            Update { idx, hyp: best.map(|(_, nh, c, _)| (nh, c)), frame: Some(next_frame) }
                        })
                        .collect()
                })
                .collect()
        };
        self.apply(view, updates)
    }

    fn level_costs(&self, view: usize) -> Vec<Vec<f64>> {
        self.states[view].levels.iter().map(|l| l.costs.clone()).collect()
    }

    fn mean_cost(&self, view: usize) -> f64 {
        let c = &self.states[view].levels[0].costs;
        c.iter().sum::<f64>() / c.len() as f64
    }

    /// The M-step for `view` on its anchors; `Ok(None)` when the proposal
    /// does not improve the anchor objective.
    pub fn em_step(&mut self, view: usize, iteration: usize) -> Result<(usize, Option<[f64; 3]>), EmError> {
        let (w, h) = (self.cameras[view].width(), self.cameras[view].height());
        let pixels = self.data[view].anchors.reference_pixels(w, h);
        let comps: Vec<Option<CostComponents>> = {
            let ev = self.evaluator(view);
            let l0 = &self.states[view].levels[0].hypotheses;
            pixels.par_iter().map(|&(x, y)| ev.evaluate(0, x, y, l0.get(x, y)).map(|r| r.1)).collect()
        };
        let stats = collect_anchor_costs(&comps, self.cfg.min_anchors)?;
        let s = stats.means();
        let mu = barrier_schedule(iteration, self.cfg.outer_iterations, self.cfg.barrier_start, self.cfg.barrier_end);
        let eta = self.cfg.hyper.eta;
        let proposal = m_step(&s, eta, mu)?;
        let accepted = accept_weights(&self.states[view].hyper.weights(), &proposal, &s, eta);
        if let Some(wts) = accepted {
            let targets: Vec<usize> = if self.cfg.global_weights { (0..self.states.len()).collect() } else { vec![view] };
            for t in targets {
                self.states[t].hyper.set_weights(wts);
            }
        }
        Ok((stats.count, accepted))
    }

    /// One turn of `view`: rescore, propagation sweeps, refinement rounds,
    /// then the weight update.
    pub fn run_view(&mut self, view: usize, iteration: usize, observer: &mut dyn FnMut(&SweepRecord<'_>)) -> IterationStats {
        self.states[view].iteration = iteration;
        self.rescore(view);
        let mean_cost_start = self.mean_cost(view);
        let mut updates = 0;
        let step = |rec: &mut Self, kind: SweepKind, observer: &mut dyn FnMut(&SweepRecord<'_>)| {
            let before = rec.level_costs(view);
            let n = match kind {
                SweepKind::Propagation { parity, .. } => rec.propagation_sweep(view, parity),
                SweepKind::Refinement { round, parity } => rec.refinement_sweep(view, parity, round),
            };
            let after = rec.level_costs(view);
            observer(&SweepRecord { view, iteration, kind, before: &before, after: &after });
            n
        };
        for sweep in 0..self.cfg.prop_sweeps {
            for parity in 0..2 {
                updates += step(self, SweepKind::Propagation { sweep, parity }, observer);
            }
        }
        if self.cfg.ablation.refine_mode() != RefineMode::Off {
            for round in 1..=self.cfg.hyper.n_max {
                for parity in 0..2 {
                    updates += step(self, SweepKind::Refinement { round, parity }, observer);
                }
            }
        }
        let mean_cost_end = self.mean_cost(view);
        let em_anchors = if self.cfg.ablation.em() {
            match self.em_step(view, iteration) {
                Ok((n, _)) => Some(n),
                Err(e) => {
                    log::debug!("view {view}: EM skipped: {e}");
                    None
                }
            }
        } else {
            None
        };
        let st = IterationStats { iteration, view, mean_cost_start, mean_cost_end, updates, weights: self.weights(view), em_anchors };
        log::info!(
            "iteration {iteration} view {view}: cost {:.4} -> {:.4}, {updates} updates, weights {:?}",
            st.mean_cost_start,
            st.mean_cost_end,
            st.weights
        );
        self.stats.push(st.clone());
        st
    }

    /// All views once, in order. Maps become visible to the reprojection
    /// term only after the whole iteration.
    pub fn run_iteration(&mut self, iteration: usize, observer: &mut dyn FnMut(&SweepRecord<'_>)) {
        for v in 0..self.data.len() {
            self.run_view(v, iteration, observer);
        }
        for s in &mut self.states {
            s.estimated = true;
        }
    }

    /// Every outer iteration.
    pub fn run(&mut self) {
        self.run_observed(&mut |_| {});
    }

    pub fn run_observed(&mut self, observer: &mut dyn FnMut(&SweepRecord<'_>)) {
        for it in 0..self.cfg.outer_iterations {
            self.run_iteration(it, observer);
        }
    }
}

enum BuildError {
    Imaging(ImagingError),
    Geometry(GeometryError),
}

fn build_view(input: &ViewInput, cfg: &Config) -> Result<ViewData, BuildError> {
    let k = cfg.hyper.levels;
    let gray = build_pyramid(&input.image.to_gray(), k).map_err(BuildError::Imaging)?;
    let color = build_pyramid(&input.image, k).map_err(BuildError::Imaging)?;
    let labels0 = match &input.labels {
        Some(l) => l.clone(),
        None => fallback_segment(&input.image, &FallbackParams::default()),
    };
    let l = cfg.hyper.patch_len;
    let fixed = acm_patch(l);
    let mut levels = Vec::with_capacity(k + 1);
    for m in 0..=k {
        let (w, h) = gray.dims(m);
        let cam = input.camera.at_level(m, w, h).map_err(BuildError::Geometry)?;
        let labels = if m == 0 { labels0.clone() } else { labels0.downsample_nearest(m, w, h) };
        let dist = boundary_distances(&labels, cfg.cap_distance);
        let patches: Vec<DeformedPatch> = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let (x, y) = (i % w, i / w);
                deform_patch_at(&labels, dist.at(x, y), x, y, l)
            })
            .collect();
        let window = if cfg.ablation.deformed_cost() {
            WindowCache::build(gray.level(m), |x, y| &patches[y * w + x], &cfg.ncc)
        } else {
            WindowCache::build(gray.level(m), |_, _| &fixed, &cfg.ncc)
        };
        levels.push(LevelData {
            cam,
            lap: laplacian_image(color.level(m)),
            labels,
            dist,
            patches,
            window,
            parity: checkerboard_schedule(w, h),
        });
    }
    Ok(ViewData { gray, levels, anchors: input.anchors.clone().unwrap_or_default() })
}

/// Fusion thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuseParams {
    pub consistency_min: usize,
    pub rel_tol: f64,
    pub angle_deg: f64,
}

impl Default for FuseParams {
    fn default() -> Self {
        Self { consistency_min: 2, rel_tol: 0.01, angle_deg: 10.0 }
    }
}

impl From<&Config> for FuseParams {
    fn from(c: &Config) -> Self {
        Self { consistency_min: c.consistency_min, rel_tol: c.fuse_rel_tol, angle_deg: c.fuse_angle_deg }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedPoint {
    pub position: Vec3,
    pub normal: Vec3,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusedPointCloud {
    pub points: Vec<FusedPoint>,
}

impl FusedPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One view's input to [`fuse`].
#[derive(Debug, Clone, Copy)]
pub struct FuseView<'a> {
    pub camera: &'a CameraModel,
    pub depth: &'a DepthMap,
    pub image: Option<&'a ImageGrid>,
}

/// Observation of a reference pixel's point in another view, if that view
/// agrees on depth and normal: `(pixel index, world point, world normal)`.
pub fn consistent_observation(
    r: &FuseView<'_>,
    x: usize,
    y: usize,
    s: &FuseView<'_>,
    params: &FuseParams,
) -> Option<(usize, Vec3, Vec3)> {
    let h = r.depth.hypothesis(x, y);
    if !(h.depth > 0.0) {
        return None;
    }
    let world = r.camera.unproject(&Pixel::new(x as f64, y as f64), h.depth).ok()?;
    let proj = s.camera.project(&world).ok()?;
    let (qx, qy) = (proj.pixel.x.round(), proj.pixel.y.round());
    if qx < 0.0 || qy < 0.0 || qx >= s.depth.width as f64 || qy >= s.depth.height as f64 {
        return None;
    }
    let (qx, qy) = (qx as usize, qy as usize);
    let hs = s.depth.hypothesis(qx, qy);
    if !(hs.depth > 0.0) {
        return None;
    }
    let n_world = r.camera.rotation().transpose() * h.normal;
    let mine = PlaneHypothesis::new(proj.depth, s.camera.rotation() * n_world);
    if !depth_edge_consistency(&mine, &hs, params.rel_tol, params.angle_deg.to_radians()) {
        return None;
    }
    let ws = s.camera.unproject(&Pixel::new(qx as f64, qy as f64), hs.depth).ok()?;
    Some((qy * s.depth.width + qx, ws, s.camera.rotation().transpose() * hs.normal))
}

fn color_at(img: Option<&ImageGrid>, x: usize, y: usize) -> [f64; 3] {
    match img {
        Some(im) if im.channels() == 3 => [im.get(x, y, 0) as f64, im.get(x, y, 1) as f64, im.get(x, y, 2) as f64],
        Some(im) => [im.get(x, y, 0) as f64; 3],
        None => [0.5; 3],
    }
}

/// Consistency fusion. Views are visited in order; each unconsumed pixel
/// with a valid depth is checked against every other view and emits the
/// average of the agreeing observations when at least `consistency_min`
/// views (itself included) agree. Contributing pixels are consumed.
pub fn fuse(views: &[FuseView<'_>], params: &FuseParams) -> FusedPointCloud {
    let mut consumed: Vec<Vec<bool>> = views.iter().map(|v| vec![false; v.depth.width * v.depth.height]).collect();
    let mut cloud = FusedPointCloud::default();
    for (r, rv) in views.iter().enumerate() {
        let w = rv.depth.width;
        // emitted point plus the (view, pixel) observations it consumes
        type Emitted = Option<(FusedPoint, Vec<(usize, usize)>)>;
        let results: Vec<Emitted> = (0..w * rv.depth.height)
            .into_par_iter()
            .map(|i| {
                if consumed[r][i] {
                    return None;
                }
                let (x, y) = (i % w, i / w);
                let h = rv.depth.hypothesis(x, y);
                if !(h.depth > 0.0) {
                    return None;
                }
                let mut pos = rv.camera.unproject(&Pixel::new(x as f64, y as f64), h.depth).ok()?;
                let mut nrm = rv.camera.rotation().transpose() * h.normal;
                let mut col = color_at(rv.image, x, y);
                let mut used = Vec::new();
                for (s, sv) in views.iter().enumerate() {
                    if s == r {
                        continue;
                    }
                    if let Some((j, p, n)) = consistent_observation(rv, x, y, sv, params) {
                        pos += p;
                        nrm += n;
                        let c = color_at(sv.image, j % sv.depth.width, j / sv.depth.width);
                        for (a, b) in col.iter_mut().zip(c) {
                            *a += b;
                        }
                        used.push((s, j));
                    }
                }
                let count = used.len() + 1;
                if count < params.consistency_min.max(1) {
                    return None;
                }
                let nf = count as f64;
                let to_u8 = |v: f64| ((v / nf).clamp(0.0, 1.0) * 255.0).round() as u8;
                let point = FusedPoint { position: pos / nf, normal: nrm.normalize(), color: [to_u8(col[0]), to_u8(col[1]), to_u8(col[2])] };
                Some((point, used))
            })
            .collect();
        for (i, res) in results.into_iter().enumerate() {
            if let Some((p, used)) = res {
                consumed[r][i] = true;
                for (s, j) in used {
                    consumed[s][j] = true;
                }
                cloud.points.push(p);
            }
        }
    }
    cloud
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_mapping_between_levels() {
        assert_eq!(map_pixel(0, 0, 0, 1, 80, 60), (0, 0));
        assert_eq!(map_pixel(3, 5, 0, 1, 80, 60), (1, 2));
        assert_eq!(map_pixel(159, 119, 0, 2, 40, 30), (39, 29));
        // level 1 pixel 2 covers level 0 pixels 4 and 5
        assert_eq!(map_pixel(2, 2, 1, 0, 160, 120), (5, 5));
        assert_eq!(map_pixel(7, 9, 1, 1, 80, 60), (7, 9));
    }

    #[test]
    fn rng_streams_differ_per_pixel() {
        let a: u64 = pixel_rng(0, [0, 0, 1, 0, 1]).random();
        let b: u64 = pixel_rng(0, [0, 0, 2, 0, 1]).random();
        let c: u64 = pixel_rng(0, [0, 0, 1, 0, 1]).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn single_view_fuses_to_nothing() {
        let cam = CameraModel::new(Mat3::new(50.0, 0.0, 15.5, 0.0, 50.0, 11.5, 0.0, 0.0, 1.0), Mat3::identity(), Vec3::zeros(), 32, 24).unwrap();
        let map = DepthMap {
            width: 32,
            height: 24,
            depths: vec![2.0; 32 * 24],
            normals: vec![[0.0, 0.0, -1.0]; 32 * 24],
            costs: vec![0.0; 32 * 24],
        };
        let v = FuseView { camera: &cam, depth: &map, image: None };
        assert!(fuse(&[v], &FuseParams::default()).is_empty());
        let p = FuseParams { consistency_min: 1, ..FuseParams::default() };
        assert_eq!(fuse(&[v], &p).len(), 32 * 24);
    }
}
