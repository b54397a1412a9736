//! Cost-weight estimation: anchor correspondences, per-component statistics
//! over anchors and the constrained weight update.
//!
//! The weight problem is `min w.S` over `{w : sum w = 1, w_i >= eta}`. It is
//! linear, so its exact minimiser is a vertex; the solver below follows the
//! log-barrier central path with damped Newton steps, which reaches the
//! vertex as the barrier weight shrinks.

use crate::cost::{CostComponents, SENTINEL_COST};
use crate::imaging::ImageView;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmError {
    #[error("component sums must be finite and non-negative")]
    DegenerateSums,
    #[error("only {got} valid anchors, need {need}")]
    TooFewAnchors { got: usize, need: usize },
    #[error("weight floor {0} outside (0, 1/3)")]
    BadFloor(f64),
}

/// A feature correspondence between a reference pixel and a source pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub ref_px: (f64, f64),
    pub src_px: (f64, f64),
    pub src_view: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Distinct reference pixels (rounded), in first-seen order.
    pub fn reference_pixels(&self, width: usize, height: usize) -> Vec<(usize, usize)> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for a in &self.anchors {
            let (x, y) = (a.ref_px.0.round(), a.ref_px.1.round());
            if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
                continue;
            }
            let p = (x as usize, y as usize);
            if seen.insert(p) {
                out.push(p);
            }
        }
        out
    }
}

/// Component sums over the valid anchors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorStats {
    pub sums: [f64; 3],
    pub count: usize,
}

impl AnchorStats {
    pub fn means(&self) -> [f64; 3] {
        let n = self.count.max(1) as f64;
        [self.sums[0] / n, self.sums[1] / n, self.sums[2] / n]
    }
}

/// Sums `(C_ms, C_rp, C_pc)` over anchors, skipping anchors without
/// components or with a sentinel matching cost.
pub fn collect_anchor_costs(components: &[Option<CostComponents>], min_anchors: usize) -> Result<AnchorStats, EmError> {
    let mut sums = [0.0; 3];
    let mut count = 0;
    for c in components.iter().flatten() {
        if c.c_ms >= SENTINEL_COST || !c.as_array().iter().all(|v| v.is_finite()) {
            continue;
        }
        for (s, v) in sums.iter_mut().zip(c.as_array()) {
            *s += v;
        }
        count += 1;
    }
    if count < min_anchors {
        return Err(EmError::TooFewAnchors { got: count, need: min_anchors });
    }
    Ok(AnchorStats { sums, count })
}

fn check_inputs(s: &[f64; 3], eta: f64) -> Result<(), EmError> {
    if !(eta > 0.0 && eta < 1.0 / 3.0) {
        return Err(EmError::BadFloor(eta));
    }
    if s.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(EmError::DegenerateSums);
    }
    Ok(())
}

/// Exact minimiser by vertex enumeration: `1 - 2 eta` on the cheapest
/// component, `eta` elsewhere. Ties go to the lower index.
pub fn lp_vertex(s: &[f64; 3], eta: f64) -> Result<[f64; 3], EmError> {
    check_inputs(s, eta)?;
    let mut best = [0.0; 3];
    let mut best_val = f64::INFINITY;
    for i in 0..3 {
        let mut w = [eta; 3];
        w[i] = 1.0 - 2.0 * eta;
        let v: f64 = w.iter().zip(s).map(|(a, b)| a * b).sum();
        if v < best_val {
            best_val = v;
            best = w;
        }
    }
    Ok(best)
}

/// Barrier objective over the reduced variables `(w0, w1)`, `w2 = 1 - w0 - w1`.
fn barrier(s: &[f64; 3], eta: f64, mu: f64, a: f64, b: f64) -> Option<f64> {
    let c = 1.0 - a - b;
    let (sa, sb, sc) = (a - eta, b - eta, c - eta);
    if sa <= 0.0 || sb <= 0.0 || sc <= 0.0 {
        return None;
    }
    Some(s[0] * a + s[1] * b + s[2] * c - mu * (sa.ln() + sb.ln() + sc.ln()))
}

/// Minimises `w.S - mu sum log(w_i - eta)` on `sum w = 1` by damped Newton
/// steps on the two free coordinates, starting from the barycenter and
/// stopping when half the squared Newton decrement drops below `1e-10`.
pub fn m_step(s: &[f64; 3], eta: f64, mu: f64) -> Result<[f64; 3], EmError> {
    check_inputs(s, eta)?;
    let (mut a, mut b) = (1.0 / 3.0, 1.0 / 3.0);
    for _ in 0..200 {
        let c = 1.0 - a - b;
        let (ia, ib, ic) = (1.0 / (a - eta), 1.0 / (b - eta), 1.0 / (c - eta));
        let ga = s[0] - s[2] - mu * ia + mu * ic;
        let gb = s[1] - s[2] - mu * ib + mu * ic;
        let hc = mu * ic * ic;
        let haa = mu * ia * ia + hc;
        let hbb = mu * ib * ib + hc;
        let det = haa * hbb - hc * hc;
        if !(det > 0.0) {
            break;
        }
        let da = -(hbb * ga - hc * gb) / det;
        let db = -(haa * gb - hc * ga) / det;
        let decrement = -(ga * da + gb * db);
        if decrement / 2.0 < 1e-10 {
            break;
        }
        let f0 = barrier(s, eta, mu, a, b).expect("iterate stays feasible");
        let mut t = 1.0;
        loop {
            if let Some(f) = barrier(s, eta, mu, a + t * da, b + t * db) {
                if f <= f0 - 0.25 * t * decrement {
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-16 {
                break;
            }
        }
        if t < 1e-16 {
            break;
        }
        a += t * da;
        b += t * db;
    }
    Ok([a, b, 1.0 - a - b])
}

/// Euclidean projection onto `{sum w = 1, w_i >= eta}`.
pub fn project_to_simplex(w: &[f64; 3], eta: f64) -> [f64; 3] {
    let budget = 1.0 - 3.0 * eta;
    let v = [w[0] - eta, w[1] - eta, w[2] - eta];
    let mut u = v;
    u.sort_by(|a, b| b.total_cmp(a));
    let mut theta = 0.0;
    let mut cum = 0.0;
    for (i, ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - budget) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = (v[i] - theta).max(0.0) + eta;
    }
    out
}

/// Rescales non-negative weights to unit sum, then projects onto the floor
/// constraint if needed. Scaling keeps the ranking of hypotheses intact.
pub fn to_constraint_set(w: &[f64; 3], eta: f64) -> [f64; 3] {
    let s: f64 = w.iter().sum();
    if !(s > 0.0) {
        return [1.0 / 3.0; 3];
    }
    let n = [w[0] / s, w[1] / s, w[2] / s];
    if n.iter().all(|&v| v >= eta) {
        n
    } else {
        project_to_simplex(&n, eta)
    }
}

/// Keeps the proposal only if it does not raise `w.S` above the incumbent
/// (taken on the constraint set).
pub fn accept_weights(incumbent: &[f64; 3], proposal: &[f64; 3], s: &[f64; 3], eta: f64) -> Option<[f64; 3]> {
    let base = to_constraint_set(incumbent, eta);
    let dot = |w: &[f64; 3]| w[0] * s[0] + w[1] * s[1] + w[2] * s[2];
    (dot(proposal) <= dot(&base)).then_some(*proposal)
}

/// Barrier weight for outer round `round` of `rounds`, geometric between
/// `start` and `end`.
pub fn barrier_schedule(round: usize, rounds: usize, start: f64, end: f64) -> f64 {
    if rounds <= 1 {
        return end;
    }
    let t = round.min(rounds - 1) as f64 / (rounds - 1) as f64;
    start * (end / start).powf(t)
}

const HARRIS_K: f64 = 0.04;
const MATCH_RADIUS: i64 = 3;

fn harris_corners(img: ImageView<'_>, max_corners: usize) -> Vec<(usize, usize)> {
    let (w, h) = (img.width, img.height);
    if w < 12 || h < 12 {
        return Vec::new();
    }
    let mut ixx = vec![0.0f64; w * h];
    let mut iyy = vec![0.0f64; w * h];
    let mut ixy = vec![0.0f64; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = 0.5 * (img.at(x + 1, y, 0) - img.at(x - 1, y, 0)) as f64;
            let gy = 0.5 * (img.at(x, y + 1, 0) - img.at(x, y - 1, 0)) as f64;
            ixx[y * w + x] = gx * gx;
            iyy[y * w + x] = gy * gy;
            ixy[y * w + x] = gx * gy;
        }
    }
    let mut resp = vec![0.0f64; w * h];
    let r = 2usize;
    let margin = MATCH_RADIUS as usize + 2;
    for y in margin..h - margin {
        for x in margin..w - margin {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for yy in y - r..=y + r {
                for xx in x - r..=x + r {
                    a += ixx[yy * w + xx];
                    b += iyy[yy * w + xx];
                    c += ixy[yy * w + xx];
                }
            }
            resp[y * w + x] = a * b - c * c - HARRIS_K * (a + b) * (a + b);
        }
    }
    let peak = resp.iter().cloned().fold(0.0, f64::max);
    if peak < 1e-8 {
        return Vec::new();
    }
    let mut corners = Vec::new();
    for y in margin..h - margin {
        for x in margin..w - margin {
            let v = resp[y * w + x];
            if v < 0.01 * peak {
                continue;
            }
            let mut is_max = true;
            'nms: for yy in y - 2..=y + 2 {
                for xx in x - 2..=x + 2 {
                    let o = resp[yy * w + xx];
                    if (yy, xx) != (y, x) && (o > v || (o == v && (yy, xx) < (y, x))) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if is_max {
                corners.push((v, x, y));
            }
        }
    }
    corners.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    corners.truncate(max_corners);
    corners.into_iter().map(|(_, x, y)| (x, y)).collect()
}

fn patch_ncc(a: ImageView<'_>, pa: (usize, usize), b: ImageView<'_>, pb: (usize, usize)) -> f64 {
    let mut va = Vec::with_capacity(49);
    let mut vb = Vec::with_capacity(49);
    for dy in -MATCH_RADIUS..=MATCH_RADIUS {
        for dx in -MATCH_RADIUS..=MATCH_RADIUS {
            va.push(a.at((pa.0 as i64 + dx) as usize, (pa.1 as i64 + dy) as usize, 0) as f64);
            vb.push(b.at((pb.0 as i64 + dx) as usize, (pb.1 as i64 + dy) as usize, 0) as f64);
        }
    }
    let n = va.len() as f64;
    let ma = va.iter().sum::<f64>() / n;
    let mb = vb.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..va.len() {
        sab += (va[i] - ma) * (vb[i] - mb);
        saa += (va[i] - ma).powi(2);
        sbb += (vb[i] - mb).powi(2);
    }
    if saa < 1e-12 || sbb < 1e-12 {
        return -1.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Harris corners of the reference matched to corners of each source by
/// 7x7 patch correlation with a ratio test on `1 - ncc`. Inputs are
/// single-channel.
pub fn detect_anchors(reference: ImageView<'_>, sources: &[(usize, ImageView<'_>)], max_corners: usize) -> AnchorSet {
    let ref_corners = harris_corners(reference, max_corners);
    let mut anchors = Vec::new();
    for &(view, src) in sources {
        let src_corners = harris_corners(src, max_corners);
        if src_corners.is_empty() {
            continue;
        }
        for &pr in &ref_corners {
            let (mut best, mut second, mut arg) = (-2.0f64, -2.0f64, 0usize);
            for (j, &ps) in src_corners.iter().enumerate() {
                let s = patch_ncc(reference, pr, src, ps);
                if s > best {
                    second = best;
                    best = s;
                    arg = j;
                } else if s > second {
                    second = s;
                }
            }
            if best < 0.8 || (1.0 - best) > 0.7 * (1.0 - second) {
                continue;
            }
            let ps = src_corners[arg];
            anchors.push(Anchor {
                ref_px: (pr.0 as f64, pr.1 as f64),
                src_px: (ps.0 as f64, ps.1 as f64),
                src_view: view,
            });
        }
    }
    AnchorSet { anchors }
}
