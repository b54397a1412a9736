use super::InstanceLabelMap;
use crate::imaging::ImageGrid;

/// Tolerances of the built-in region grower.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FallbackParams {
    /// Max chromaticity distance to the region seed (color images only).
    pub chroma_tol: f32,
    /// Max intensity step between 4-neighbours.
    pub intensity_tol: f32,
    /// Regions smaller than this are merged into a neighbour.
    pub min_region: usize,
}

impl Default for FallbackParams {
    fn default() -> Self {
        Self { chroma_tol: 0.03, intensity_tol: 0.12, min_region: 24 }
    }
}

fn chroma(px: &[f32]) -> [f32; 2] {
    let s = px[0] + px[1] + px[2] + 1e-6;
    [px[0] / s, px[1] / s]
}

fn intensity(px: &[f32]) -> f32 {
    px.iter().sum::<f32>() / px.len() as f32
}

/// Connected-component labeling by flood fill: a pixel joins its
/// neighbour's region when their intensities differ by less than
/// `intensity_tol` and, for color input, its chromaticity stays within
/// `chroma_tol` of the region seed. Tiny regions are then absorbed by the
/// neighbour they share the longest border with. Labels start at 1.
pub fn fallback_segment(img: &ImageGrid, params: &FallbackParams) -> InstanceLabelMap {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let px = |i: usize| &img.samples()[i * ch..(i + 1) * ch];
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let seed_chroma = (ch == 3).then(|| chroma(px(start)));
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let here = intensity(px(i));
            let mut visit = |j: usize| {
                if labels[j] != 0 || (intensity(px(j)) - here).abs() > params.intensity_tol {
                    return;
                }
                if let Some(sc) = seed_chroma {
                    let c = chroma(px(j));
                    if (c[0] - sc[0]).hypot(c[1] - sc[1]) > params.chroma_tol {
                        return;
                    }
                }
                labels[j] = next;
                stack.push(j);
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
    }
    merge_small(&mut labels, w, h, next as usize, params.min_region);
    InstanceLabelMap::new(w, h, compact(labels)).expect("dimensions preserved")
}

fn merge_small(labels: &mut [u32], w: usize, h: usize, count: usize, min_region: usize) {
    // a few passes so chains of small regions settle into large ones
    for _ in 0..4 {
        let mut size = vec![0usize; count + 1];
        for &l in labels.iter() {
            size[l as usize] += 1;
        }
        let mut contact: std::collections::HashMap<(u32, u32), usize> = Default::default();
        for y in 0..h {
            for x in 0..w {
                let a = labels[y * w + x];
                if size[a as usize] >= min_region {
                    continue;
                }
                for (nx, ny) in [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)] {
                    if nx < w && ny < h {
                        let b = labels[ny * w + nx];
                        if b != a {
                            *contact.entry((a, b)).or_default() += 1;
                        }
                    }
                }
            }
        }
        let mut target: Vec<u32> = (0..=count as u32).collect();
        let mut best = vec![(0usize, 0usize, 0u32); count + 1];
        // prefer the neighbour with the longest border, then the larger one
        let mut pairs: Vec<_> = contact.into_iter().collect();
        pairs.sort_unstable();
        for ((a, b), n) in pairs {
            let key = (n, size[b as usize], b);
            if key > best[a as usize] {
                best[a as usize] = key;
            }
        }
        let mut changed = false;
        for a in 1..=count {
            if size[a] > 0 && size[a] < min_region && best[a].2 != 0 {
                target[a] = best[a].2;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for l in labels.iter_mut() {
            *l = target[*l as usize];
        }
    }
}

fn compact(mut labels: Vec<u32>) -> Vec<u32> {
    let mut remap = std::collections::HashMap::new();
    for l in labels.iter_mut() {
        let n = remap.len() as u32 + 1;
        *l = *remap.entry(*l).or_insert(n);
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_halves_give_two_labels() {
        let img = ImageGrid::from_fn(40, 30, 3, |x, _, c| if x < 20 { [0.8, 0.2, 0.2][c] } else { [0.2, 0.3, 0.8][c] });
        let map = fallback_segment(&img, &FallbackParams::default());
        assert_eq!(map.distinct_labels(), vec![1, 2]);
        assert_ne!(map.get(0, 0), map.get(39, 29));
    }

    #[test]
    fn constant_image_gives_one_label() {
        let img = ImageGrid::constant(33, 17, 1, 0.4);
        assert_eq!(fallback_segment(&img, &FallbackParams::default()).distinct_labels(), vec![1]);
    }

    #[test]
    fn specks_are_absorbed() {
        let img = ImageGrid::from_fn(30, 30, 1, |x, y, _| if (10..12).contains(&x) && (10..12).contains(&y) { 1.0 } else { 0.0 });
        assert_eq!(fallback_segment(&img, &FallbackParams::default()).distinct_labels(), vec![1]);
    }
}
