use super::Distances;

/// Branch order shared by lengths, sample lists and search domains. Ties in
/// propagation are broken by this order.
pub const BRANCH_NAMES: [&str; 8] = ["u", "r", "d", "l", "ur", "dr", "dl", "ul"];

/// Opposite branch pairs whose samples are split at the midpoint.
const PAIRS: [(usize, usize); 4] = [(0, 2), (1, 3), (4, 6), (5, 7)];

/// Eight-branch propagation geometry of one pixel. Sample offsets are in
/// image coordinates relative to the pixel.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PropagationPattern {
    /// Branch lengths in pixels, [`BRANCH_NAMES`] order.
    pub lengths: [f64; 8],
    /// Slant of the corner branches `ur, dr, dl, ul` above the horizontal
    /// axis, radians.
    pub angles: [f64; 4],
    branches: [Vec<(i32, i32)>; 8],
    domains: [Vec<(i32, i32)>; 8],
}

impl PropagationPattern {
    pub fn branches(&self) -> &[Vec<(i32, i32)>; 8] {
        &self.branches
    }

    pub fn domains(&self) -> &[Vec<(i32, i32)>; 8] {
        &self.domains
    }

    pub fn is_empty(&self) -> bool {
        self.domains.iter().all(|d| d.is_empty())
    }

    pub fn sample_count(&self) -> usize {
        self.domains.iter().map(Vec::len).sum()
    }
}

/// Horizontal and vertical pattern extents for base length `base`, split in
/// proportion to the boundary distances like the matching window.
pub fn pattern_dims(d: Distances, base: f64) -> (f64, f64) {
    let sum = d.sum() as f64;
    if sum == 0.0 {
        return (0.0, 0.0);
    }
    (base * (d.left + d.right) as f64 / sum, base * (d.down + d.up) as f64 / sum)
}

fn split(a: u32, b: u32, total: f64) -> f64 {
    if a + b == 0 {
        total / 2.0
    } else {
        a as f64 / (a + b) as f64 * total
    }
}

/// Stride-1 samples along `(vx, vy)` up to its rounded length, paired with
/// their distance from the origin.
fn ray(vx: f64, vy: f64) -> Vec<(i32, i32, f64)> {
    let len = vx.hypot(vy);
    let n = len.round() as i32;
    let mut out: Vec<(i32, i32, f64)> = Vec::with_capacity(n.max(0) as usize);
    for t in 1..=n {
        let f = t as f64 / len;
        let p = ((vx * f).round() as i32, (vy * f).round() as i32);
        if p == (0, 0) || out.last().is_some_and(|q| (q.0, q.1) == p) {
            continue;
        }
        out.push((p.0, p.1, t as f64));
    }
    out
}

/// Branch lengths, slant angles, branch samples and the midpoint-balanced
/// search domains for one pixel.
///
/// All-zero distances (a pixel without a usable instance) give an empty
/// pattern.
pub fn propagation_pattern(d: Distances, l_h: f64, l_v: f64) -> PropagationPattern {
    if d.sum() == 0 {
        return PropagationPattern::default();
    }
    let l_u = split(d.up, d.down, l_v);
    let l_d = l_v - l_u;
    let l_l = split(d.left, d.right, l_h);
    let l_r = l_h - l_l;
    let vectors = [
        (0.0, -l_u),
        (l_r, 0.0),
        (0.0, l_d),
        (-l_l, 0.0),
        (l_r, -l_u),
        (l_r, l_d),
        (-l_l, l_d),
        (-l_l, -l_u),
    ];
    let mut lengths = [0.0; 8];
    for (len, v) in lengths.iter_mut().zip(vectors) {
        *len = v.0.hypot(v.1);
    }
    let angles = [l_u.atan2(l_r), l_d.atan2(l_r), l_d.atan2(l_l), l_u.atan2(l_l)];
    let rays: Vec<_> = vectors.iter().map(|&(x, y)| ray(x, y)).collect();

    let mut domains: [Vec<(i32, i32)>; 8] = Default::default();
    for (a, b) in PAIRS {
        // line coordinate: +t along branch a, -t along branch b
        let mid = (lengths[a] - lengths[b]) / 2.0;
        for &(x, y, t) in &rays[a] {
            let target = if t < mid - 1e-9 { b } else { a };
            domains[target].push((x, y));
        }
        for &(x, y, t) in &rays[b] {
            let target = if -t > mid + 1e-9 { a } else { b };
            domains[target].push((x, y));
        }
    }
    let branches = std::array::from_fn(|i| rays[i].iter().map(|&(x, y, _)| (x, y)).collect());
    PropagationPattern { lengths, angles, branches, domains }
}

/// Fixed pattern with four near V-shaped and four far strip domains, in the
/// order near u, r, d, l then far u, r, d, l.
pub fn acm_pattern() -> PropagationPattern {
    let near_up: Vec<(i32, i32)> = std::iter::once((0, -1))
        .chain((1..=3).flat_map(|k| [(-k, -k - 1), (k, -k - 1)]))
        .collect();
    let far_up: Vec<(i32, i32)> = (1..=11).map(|k| (0, -(2 * k + 1))).collect();
    // quarter turns clockwise on screen: up -> right -> down -> left
    let turn = |v: &[(i32, i32)], times: usize| -> Vec<(i32, i32)> {
        v.iter()
            .map(|&(mut x, mut y)| {
                for _ in 0..times {
                    (x, y) = (-y, x);
                }
                (x, y)
            })
            .collect()
    };
    let domains: [Vec<(i32, i32)>; 8] =
        std::array::from_fn(|i| if i < 4 { turn(&near_up, i) } else { turn(&far_up, i - 4) });
    let mut lengths = [4.0; 8];
    lengths[4..].fill(23.0);
    PropagationPattern { lengths, angles: [0.0; 4], branches: domains.clone(), domains }
}
