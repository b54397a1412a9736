//! Candidate gathering over the eight search domains and the PatchMatch
//! accept step.

use crate::geometry::PlaneHypothesis;
use crate::segmentation::PropagationPattern;

pub use crate::segmentation::checkerboard_schedule;

/// Read-only view of one pyramid level's committed state.
#[derive(Debug, Clone, Copy)]
pub struct LevelState<'a> {
    pub width: usize,
    pub height: usize,
    pub hypotheses: &'a [PlaneHypothesis],
    pub costs: &'a [f64],
}

/// Where to enumerate one level's share of the domains: the pixel's
/// position at that level and the pattern anchored there.
#[derive(Debug, Clone, Copy)]
pub struct LevelQuery<'a> {
    pub level: usize,
    pub state: LevelState<'a>,
    pub center: (usize, usize),
    pub pattern: &'a PropagationPattern,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub domain: usize,
    pub level: usize,
    pub position: (usize, usize),
    pub hypothesis: PlaneHypothesis,
    pub cost: f64,
}

/// At most one candidate per domain, in direction order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateSet {
    pub entries: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Stored-cost minimum of every domain, unioned over the given levels.
/// Ties keep the first sample met (levels in query order, then pattern
/// order); out-of-bounds samples are skipped and empty domains dropped.
pub fn propagate_pixel(queries: &[LevelQuery<'_>]) -> CandidateSet {
    let mut best: [Option<Candidate>; 8] = [None; 8];
    for q in queries {
        let (w, h) = (q.state.width as i64, q.state.height as i64);
        for (d, domain) in q.pattern.domains().iter().enumerate() {
            for &(dx, dy) in domain {
                let (x, y) = (q.center.0 as i64 + dx as i64, q.center.1 as i64 + dy as i64);
                if x < 0 || y < 0 || x >= w || y >= h {
                    continue;
                }
                let i = (y * w + x) as usize;
                let cost = q.state.costs[i];
                if best[d].is_none_or(|b| cost < b.cost) {
                    best[d] = Some(Candidate {
                        domain: d,
                        level: q.level,
                        position: (x as usize, y as usize),
                        hypothesis: q.state.hypotheses[i],
                        cost,
                    });
                }
            }
        }
    }
    CandidateSet { entries: best.into_iter().flatten().collect() }
}

/// Accept step: evaluates every proposal and returns the index and result of
/// the cheapest one if it strictly beats `current_cost`. Proposals that
/// cannot be evaluated return `None`. Ties go to the earliest proposal.
pub fn evaluate_and_commit<P, T>(
    current_cost: f64,
    proposals: impl IntoIterator<Item = P>,
    mut eval: impl FnMut(&P) -> Option<(f64, T)>,
) -> Option<(usize, P, f64, T)> {
    let mut best: Option<(usize, P, f64, T)> = None;
    for (i, p) in proposals.into_iter().enumerate() {
        let Some((c, extra)) = eval(&p) else { continue };
        let bar = best.as_ref().map_or(current_cost, |b| b.2);
        if c < bar {
            best = Some((i, p, c, extra));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::segmentation::{propagation_pattern, Distances};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hyp(d: f64) -> PlaneHypothesis {
        PlaneHypothesis::new(d, Vec3::new(0.0, 0.0, -1.0))
    }

    fn level<'a>(w: usize, h: usize, hyps: &'a [PlaneHypothesis], costs: &'a [f64]) -> LevelState<'a> {
        LevelState { width: w, height: h, hypotheses: hyps, costs }
    }

    #[test]
    fn monotone_cost_picks_innermost() {
        let (w, h) = (61, 61);
        let c = (30usize, 30usize);
        let costs: Vec<f64> = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64 - 30.0, (i / w) as f64 - 30.0);
                x.abs().max(y.abs())
            })
            .collect();
        let hyps = vec![hyp(2.0); w * h];
        let pat = propagation_pattern(Distances::uniform(10), 5.0, 6.0);
        let set = propagate_pixel(&[LevelQuery { level: 0, state: level(w, h, &hyps, &costs), center: c, pattern: &pat }]);
        assert_eq!(set.len(), 8);
        for e in &set.entries {
            let (dx, dy) = (e.position.0 as i64 - 30, e.position.1 as i64 - 30);
            assert_eq!(dx.abs().max(dy.abs()), 1, "domain {} picked {:?}", e.domain, e.position);
        }
    }

    #[test]
    fn planted_minimum_on_up_branch() {
        let (w, h) = (41, 41);
        let mut costs = vec![1.0; w * h];
        costs[(20 - 3) * w + 20] = 0.1;
        let hyps: Vec<_> = (0..w * h).map(|i| hyp(1.0 + i as f64 * 1e-3)).collect();
        let pat = propagation_pattern(Distances::uniform(10), 5.0, 6.0);
        let set = propagate_pixel(&[LevelQuery { level: 0, state: level(w, h, &hyps, &costs), center: (20, 20), pattern: &pat }]);
        assert_eq!(set.entries[0].domain, 0);
        assert_eq!(set.entries[0].position, (20, 17));
        assert_eq!(set.entries[0].cost, 0.1);
    }

    #[test]
    fn degenerate_pattern_gives_empty_set() {
        let pat = propagation_pattern(Distances::uniform(0), 1.0, 1.0);
        let hyps = vec![hyp(2.0); 9];
        let costs = vec![0.5; 9];
        let set = propagate_pixel(&[LevelQuery { level: 0, state: level(3, 3, &hyps, &costs), center: (1, 1), pattern: &pat }]);
        assert!(set.is_empty());
    }

    #[test]
    fn domain_minima_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (w, h) = (rng.random_range(20..60), rng.random_range(20..60));
            let costs: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..2.0)).collect();
            let hyps: Vec<_> = (0..w * h).map(|i| hyp(1.0 + i as f64)).collect();
            let d = Distances::new(rng.random_range(0..15), rng.random_range(0..15), rng.random_range(0..15), rng.random_range(0..15));
            let pat = propagation_pattern(d, 6.0, 5.0);
            let c = (rng.random_range(0..w), rng.random_range(0..h));
            let set = propagate_pixel(&[LevelQuery { level: 0, state: level(w, h, &hyps, &costs), center: c, pattern: &pat }]);
            let mut k = 0;
            for (dom, samples) in pat.domains().iter().enumerate() {
                let mut m: Option<(f64, usize)> = None;
                for &(dx, dy) in samples {
                    let (x, y) = (c.0 as i64 + dx as i64, c.1 as i64 + dy as i64);
                    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                        let i = y as usize * w + x as usize;
                        if m.is_none_or(|(v, _)| costs[i] < v) {
                            m = Some((costs[i], i));
                        }
                    }
                }
                if let Some((v, i)) = m {
                    let e = &set.entries[k];
                    assert_eq!((e.domain, e.cost, e.position), (dom, v, (i % w, i / w)));
                    k += 1;
                }
            }
            assert_eq!(k, set.len());
        }
    }

    #[test]
    fn multi_level_union_takes_global_domain_minimum() {
        let hyps0 = vec![hyp(2.0); 400];
        let costs0 = vec![0.5; 400];
        let hyps1 = vec![hyp(3.0); 100];
        let mut costs1 = vec![0.9; 100];
        costs1[5 * 10 + 7] = 0.2; // right of (5, 5) at level 1
        let pat = propagation_pattern(Distances::uniform(8), 5.0, 6.0);
        let set = propagate_pixel(&[
            LevelQuery { level: 0, state: level(20, 20, &hyps0, &costs0), center: (10, 10), pattern: &pat },
            LevelQuery { level: 1, state: level(10, 10, &hyps1, &costs1), center: (5, 5), pattern: &pat },
        ]);
        let right = set.entries.iter().find(|e| e.domain == 1).unwrap();
        assert_eq!((right.level, right.position, right.hypothesis.depth), (1, (7, 5), 3.0));
        assert!(set.entries.iter().filter(|e| e.domain != 1).all(|e| e.level == 0));
    }

    #[test]
    fn commit_rules() {
        assert_eq!(evaluate_and_commit(0.5, [0.7, 0.9], |c| Some((*c, ()))), None);
        let r = evaluate_and_commit(0.5, [0.7, 0.3, 0.3, 0.4], |c| Some((*c, ()))).unwrap();
        assert_eq!((r.0, r.2), (1, 0.3));
        let r = evaluate_and_commit(0.5, [0.1, 0.05], |c| if *c < 0.08 { None } else { Some((*c, ())) }).unwrap();
        assert_eq!(r.0, 0);
        assert_eq!(evaluate_and_commit(0.5, [0.5], |c| Some((*c, ()))), None);
    }
}
