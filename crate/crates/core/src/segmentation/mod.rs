//! Instance label maps and the per-pixel geometry derived from them:
//! boundary distances, deformed matching patches, propagation patterns and
//! pixelwise depth intervals.

mod fallback;
mod patch;
mod pattern;

pub use fallback::{fallback_segment, FallbackParams};
pub use patch::{acm_patch, deform_patch, deform_patch_at, depth_interval, sample_budget, DeformedPatch};
pub use pattern::{acm_pattern, pattern_dims, propagation_pattern, PropagationPattern, BRANCH_NAMES};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentationError {
    #[error("label map has {got} entries, expected {expected}")]
    BadLength { got: usize, expected: usize },
    #[error("all four boundary distances are zero")]
    DegenerateDistances,
    #[error("patch has no samples inside the depth map")]
    EmptyPatch,
    #[error("base patch length must be odd and at least 5, got {0}")]
    BadPatchLength(usize),
}

/// Row-major instance ids; 0 marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceLabelMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
}

impl InstanceLabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self, SegmentationError> {
        if labels.len() != width * height {
            return Err(SegmentationError::BadLength { got: labels.len(), expected: width * height });
        }
        Ok(Self { width, height, labels })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u32) -> Self {
        let mut labels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(x, y));
            }
        }
        Self { width, height, labels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Label at a signed coordinate, `None` outside the map.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> Option<u32> {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return None;
        }
        Some(self.get(x as usize, y as usize))
    }

    /// Distinct labels in ascending order.
    pub fn distinct_labels(&self) -> Vec<u32> {
        let mut v = self.labels.clone();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Nearest-neighbour reduction to a pyramid level: level pixel `x` reads
    /// level-0 pixel `2^l x + 2^(l-1)`, the one nearest its footprint center.
    pub fn downsample_nearest(&self, level: usize, width: usize, height: usize) -> Self {
        if level == 0 {
            return self.clone();
        }
        let s = 1usize << level;
        let half = s / 2;
        Self::from_fn(width, height, |x, y| {
            let sx = (x * s + half).min(self.width - 1);
            let sy = (y * s + half).min(self.height - 1);
            self.get(sx, sy)
        })
    }
}

/// Same-label run lengths from one pixel towards the four image directions.
/// `down` is `+y` in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Distances {
    pub left: u32,
    pub right: u32,
    pub down: u32,
    pub up: u32,
}

impl Distances {
    pub fn new(left: u32, right: u32, down: u32, up: u32) -> Self {
        Self { left, right, down, up }
    }

    pub fn uniform(d: u32) -> Self {
        Self::new(d, d, d, d)
    }

    pub fn sum(&self) -> u32 {
        self.left + self.right + self.down + self.up
    }
}

/// Per-pixel [`Distances`] for a whole label map.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryDistances {
    width: usize,
    height: usize,
    cap: u32,
    data: Vec<Distances>,
}

impl BoundaryDistances {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn cap(&self) -> u32 {
        self.cap
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> Distances {
        self.data[y * self.width + x]
    }
}

/// Counts, for every pixel, the contiguous same-label pixels in each
/// direction (excluding the pixel itself) up to `cap`. Unlabeled pixels are
/// never considered equal to anything, so they get all-zero distances.
///
/// Each direction is one running scan per row or column.
pub fn boundary_distances(map: &InstanceLabelMap, cap: u32) -> BoundaryDistances {
    let (w, h) = (map.width, map.height);
    let mut data = vec![Distances::default(); w * h];
    let same = |a: u32, b: u32| a != 0 && a == b;
    for y in 0..h {
        let row = &map.labels[y * w..(y + 1) * w];
        let mut run = 0u32;
        for x in 0..w {
            if x > 0 && same(row[x], row[x - 1]) {
                run += 1;
            } else {
                run = 0;
            }
            data[y * w + x].left = run.min(cap);
        }
        run = 0;
        for x in (0..w).rev() {
            if x + 1 < w && same(row[x], row[x + 1]) {
                run += 1;
            } else {
                run = 0;
            }
            data[y * w + x].right = run.min(cap);
        }
    }
    for x in 0..w {
        let mut run = 0u32;
        for y in 0..h {
            if y > 0 && same(map.get(x, y), map.get(x, y - 1)) {
                run += 1;
            } else {
                run = 0;
            }
            data[y * w + x].up = run.min(cap);
        }
        run = 0;
        for y in (0..h).rev() {
            if y + 1 < h && same(map.get(x, y), map.get(x, y + 1)) {
                run += 1;
            } else {
                run = 0;
            }
            data[y * w + x].down = run.min(cap);
        }
    }
    BoundaryDistances { width: w, height: h, cap, data }
}

/// Red/black split of the pixel grid by `(x + y)` parity; index 0 holds the
/// even pixels.
pub fn checkerboard_schedule(width: usize, height: usize) -> [Vec<(usize, usize)>; 2] {
    let mut even = Vec::with_capacity(width * height / 2 + 1);
    let mut odd = Vec::with_capacity(width * height / 2 + 1);
    for y in 0..height {
        for x in 0..width {
            if (x + y) % 2 == 0 {
                even.push((x, y));
            } else {
                odd.push((x, y));
            }
        }
    }
    [even, odd]
}
