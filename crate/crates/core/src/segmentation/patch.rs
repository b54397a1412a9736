use super::{Distances, InstanceLabelMap, SegmentationError};

/// Matching window of one pixel after deformation.
///
/// `l_h`/`l_v` count samples per axis; samples sit on a stride-2 lattice so
/// the footprint is `2 l_h - 1` by `2 l_v - 1` pixels. `offset` is the center
/// offset in the (left, down) basis of the boundary distances and `shift`
/// the equivalent integer displacement in image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformedPatch {
    pub l_h: usize,
    pub l_v: usize,
    pub offset: (f64, f64),
    pub shift: (i32, i32),
    pub degenerate: bool,
    samples: Vec<(i32, i32)>,
}

impl DeformedPatch {
    /// Single-sample patch used for pixels without a usable instance.
    pub fn minimal() -> Self {
        Self { l_h: 1, l_v: 1, offset: (0.0, 0.0), shift: (0, 0), degenerate: true, samples: vec![(0, 0)] }
    }

    /// Sample offsets relative to the owning pixel, image coordinates.
    pub fn samples(&self) -> &[(i32, i32)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Upper bound on emitted samples for base length `l`.
pub fn sample_budget(l: usize) -> usize {
    l * l / 4
}

fn check_length(l: usize) -> Result<(), SegmentationError> {
    if l < 5 || l % 2 == 0 {
        return Err(SegmentationError::BadPatchLength(l));
    }
    Ok(())
}

fn lattice(l_h: usize, l_v: usize, shift: (i32, i32), budget: usize) -> Vec<(i32, i32)> {
    let mut out = Vec::with_capacity(l_h * l_v);
    for j in 0..l_v as i32 {
        for i in 0..l_h as i32 {
            out.push((shift.0 + 2 * i - (l_h as i32 - 1), shift.1 + 2 * j - (l_v as i32 - 1)));
        }
    }
    if out.len() > budget {
        let n = out.len();
        out = (0..budget).map(|k| out[k * n / budget]).collect();
    }
    out
}

/// Keeps a window of half-extent `half` around `s` inside `[-lo, hi]`; when
/// the window is wider than the span it is centered in it instead.
fn clamp_shift(s: i32, half: i32, lo: u32, hi: u32) -> i32 {
    let (lo, hi) = (lo as i32, hi as i32);
    let (a, b) = (-lo + half, hi - half);
    if a <= b {
        s.clamp(a, b)
    } else {
        ((hi - lo) as f64 / 2.0).round() as i32
    }
}

/// Deformed matching window from the boundary distances of one pixel.
///
/// Fractional sizes round the horizontal count half-up and give the rest to
/// the vertical one, so `l_h + l_v = l` always holds.
pub fn deform_patch(d: Distances, l: usize) -> Result<DeformedPatch, SegmentationError> {
    check_length(l)?;
    let sum = d.sum();
    if sum == 0 {
        return Err(SegmentationError::DegenerateDistances);
    }
    let lf = l as f64;
    let horiz = (d.left + d.right) as f64;
    let vert = (d.down + d.up) as f64;
    let l_h = ((lf * horiz / sum as f64) + 0.5).floor().clamp(1.0, lf - 1.0) as usize;
    let l_v = l - l_h;
    let ox = if horiz > 0.0 { (d.left as f64 - d.right as f64) / horiz * l_h as f64 } else { 0.0 };
    let oy = if vert > 0.0 { (d.down as f64 - d.up as f64) / vert * l_v as f64 } else { 0.0 };
    // (left, down) basis -> image axes (x right, y down)
    let sx = clamp_shift((-ox).round() as i32, l_h as i32 - 1, d.left, d.right);
    let sy = clamp_shift(oy.round() as i32, l_v as i32 - 1, d.up, d.down);
    Ok(DeformedPatch {
        l_h,
        l_v,
        offset: (-sx as f64, sy as f64),
        shift: (sx, sy),
        degenerate: false,
        samples: lattice(l_h, l_v, (sx, sy), sample_budget(l)),
    })
}

/// [`deform_patch`] for pixel `(x, y)` of `map`, additionally making sure the
/// shifted center carries the pixel's own label. Degenerate distances give
/// [`DeformedPatch::minimal`].
pub fn deform_patch_at(map: &InstanceLabelMap, d: Distances, x: usize, y: usize, l: usize) -> DeformedPatch {
    let mut patch = match deform_patch(d, l) {
        Ok(p) => p,
        Err(_) => return DeformedPatch::minimal(),
    };
    let own = map.get(x, y);
    let (sx, sy) = patch.shift;
    let fits = |dx: i32, dy: i32| map.get_signed(x as i64 + dx as i64, y as i64 + dy as i64) == Some(own);
    let shift = [(sx, sy), (sx, 0), (0, sy)].into_iter().find(|&(a, b)| fits(a, b)).unwrap_or((0, 0));
    if shift != patch.shift {
        patch.shift = shift;
        patch.offset = (-shift.0 as f64, shift.1 as f64);
        patch.samples = lattice(patch.l_h, patch.l_v, shift, sample_budget(l));
    }
    patch
}

/// Undeformed square window: `(l + 1) / 2` samples per axis at stride 2,
/// centered on the pixel.
pub fn acm_patch(l: usize) -> DeformedPatch {
    let n = l.div_ceil(2);
    DeformedPatch {
        l_h: n,
        l_v: n,
        offset: (0.0, 0.0),
        shift: (0, 0),
        degenerate: false,
        samples: lattice(n, n, (0, 0), usize::MAX),
    }
}

/// Min/max of the depths under the patch samples of pixel `(x, y)`,
/// intersected with `range`. Samples outside the map are skipped.
pub fn depth_interval(
    patch: &DeformedPatch,
    x: usize,
    y: usize,
    width: usize,
    height: usize,
    depth_at: impl Fn(usize, usize) -> f64,
    range: (f64, f64),
) -> Result<(f64, f64), SegmentationError> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(dx, dy) in patch.samples() {
        let (sx, sy) = (x as i64 + dx as i64, y as i64 + dy as i64);
        if sx < 0 || sy < 0 || sx >= width as i64 || sy >= height as i64 {
            continue;
        }
        let d = depth_at(sx as usize, sy as usize);
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if lo > hi {
        return Err(SegmentationError::EmptyPatch);
    }
    let lo = lo.clamp(range.0, range.1);
    let hi = hi.clamp(range.0, range.1);
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::super::boundary_distances;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_distances_give_six_by_five() {
        let p = deform_patch(Distances::uniform(10), 11).unwrap();
        assert_eq!((p.l_h, p.l_v), (6, 5));
        assert_eq!(p.offset, (0.0, 0.0));
        assert_eq!(p.len(), 30);
    }

    #[test]
    fn asymmetric_example_matches_direct_evaluation() {
        let d = Distances::new(2, 18, 10, 10);
        let p = deform_patch(d, 11).unwrap();
        // direct evaluation
        let l_h = (11.0f64 * 20.0 / 40.0 + 0.5).floor() as usize;
        let l_v = 11 - l_h;
        let ox = (2.0 - 18.0) / 20.0 * l_h as f64;
        assert_eq!((p.l_h, p.l_v), (l_h, l_v));
        assert!(ox < 0.0);
        // raw image shift is +round(4.8) = 5; the 11 px wide window must fit
        // inside [-2, 18], so the shift lies in [3, 13]
        assert_eq!(p.shift.0, 5);
        assert!(p.shift.0 > 0, "center moves right, towards the instance interior");
        assert_eq!(p.shift.1, 0);
    }

    #[test]
    fn window_is_clamped_inside_instance() {
        let d = Distances::new(0, 30, 5, 5);
        let p = deform_patch(d, 11).unwrap();
        for &(dx, dy) in p.samples() {
            assert!((0..=30).contains(&dx), "{dx}");
            assert!((-5..=5).contains(&dy));
        }
    }

    #[test]
    fn degenerate_distances() {
        assert_eq!(deform_patch(Distances::default(), 11), Err(SegmentationError::DegenerateDistances));
        let map = InstanceLabelMap::from_fn(8, 8, |_, _| 0);
        let p = deform_patch_at(&map, Distances::default(), 3, 3, 11);
        assert!(p.degenerate);
        assert_eq!(p.samples(), &[(0, 0)]);
    }

    #[test]
    fn bad_lengths_rejected() {
        assert!(deform_patch(Distances::uniform(3), 4).is_err());
        assert!(deform_patch(Distances::uniform(3), 3).is_err());
    }

    #[test]
    fn acm_window_layout() {
        let p = acm_patch(11);
        assert_eq!(p.len(), 36);
        assert_eq!(p.samples()[0], (-5, -5));
        assert_eq!(p.samples()[35], (5, 5));
    }

    #[test]
    fn invariants_on_random_label_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let table: Vec<u32> = (0..256).map(|_| rng.random_range(1..5u32)).collect();
            let (bw, bh) = (rng.random_range(1..9usize), rng.random_range(1..9usize));
            let map = InstanceLabelMap::from_fn(48, 48, |x, y| table[((y / bh) * 16 + x / bw) % 256]);
            let dist = boundary_distances(&map, 22);
            for y in 0..48 {
                for x in 0..48 {
                    let p = deform_patch_at(&map, dist.at(x, y), x, y, 11);
                    assert!(p.len() <= 30);
                    if p.degenerate {
                        continue;
                    }
                    assert_eq!(p.l_h + p.l_v, 11);
                    assert!(p.l_h >= 1 && p.l_v >= 1);
                    let c = map.get_signed(x as i64 + p.shift.0 as i64, y as i64 + p.shift.1 as i64);
                    assert_eq!(c, Some(map.get(x, y)));
                }
            }
        }
    }

    #[test]
    fn depth_interval_cases() {
        let p = deform_patch(Distances::uniform(10), 11).unwrap();
        assert_eq!(depth_interval(&p, 20, 20, 40, 40, |_, _| 2.0, (1.0, 5.0)).unwrap(), (2.0, 2.0));
        // ramp: covered columns are 15..=25
        let r = depth_interval(&p, 20, 20, 40, 40, |x, _| 1.0 + 0.1 * x as f64, (1.0, 5.0)).unwrap();
        let (lo, hi) = p.samples().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(dx, _)| {
            let v = 1.0 + 0.1 * (20 + dx) as f64;
            (lo.min(v), hi.max(v))
        });
        assert_eq!(r, (lo, hi));
        let c = depth_interval(&p, 20, 20, 40, 40, |x, _| 0.1 * x as f64, (2.0, 2.2)).unwrap();
        assert_eq!(c, (2.0, 2.2));
        assert_eq!(
            depth_interval(&DeformedPatch::minimal(), 50, 50, 40, 40, |_, _| 1.0, (1.0, 5.0)),
            Err(SegmentationError::EmptyPatch)
        );
    }
}
