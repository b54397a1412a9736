//! Image storage, box-filter downsampling, the packed scale pyramid and the
//! per-pixel stencils used by the cost terms.

use thiserror::Error;

/// Smallest admissible pyramid level edge.
pub const MIN_LEVEL_EDGE: usize = 8;
/// Per-level arena alignment (in samples).
const LEVEL_ALIGN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImagingError {
    #[error("image {width}x{height} is too small (minimum {min} per edge)")]
    TooSmall { width: usize, height: usize, min: usize },
    #[error("sample buffer has {got} entries, expected {expected}")]
    BadLength { got: usize, expected: usize },
    #[error("unsupported channel count {0}")]
    BadChannels(usize),
    #[error("image contains non-finite samples")]
    NonFinite,
    #[error("pyramid needs at least one downsampling step")]
    NoLevels,
    #[error("coordinate ({x:.3}, {y:.3}) outside the image")]
    OutOfBounds { x: f64, y: f64 },
}

/// Row-major image with 1 or 3 interleaved channels, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<f32>,
}

/// Borrowed image, either a standalone [`ImageGrid`] or a pyramid level.
#[derive(Debug, Clone, Copy)]
pub struct ImageView<'a> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub samples: &'a [f32],
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, channels: usize, samples: Vec<f32>) -> Result<Self, ImagingError> {
        if channels != 1 && channels != 3 {
            return Err(ImagingError::BadChannels(channels));
        }
        let expected = width * height * channels;
        if samples.len() != expected {
            return Err(ImagingError::BadLength { got: samples.len(), expected });
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(ImagingError::NonFinite);
        }
        Ok(Self { width, height, channels, samples })
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        assert!(channels == 1 || channels == 3);
        let mut samples = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    samples.push(f(x, y, c));
                }
            }
        }
        Self { width, height, channels, samples }
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self::from_fn(width, height, channels, |_, _, _| value)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.samples[(y * self.width + x) * self.channels + c]
    }

    pub fn view(&self) -> ImageView<'_> {
        ImageView { width: self.width, height: self.height, channels: self.channels, samples: &self.samples }
    }

    /// Rec. 601 luma; single-channel images are returned unchanged.
    pub fn to_gray(&self) -> ImageGrid {
        if self.channels == 1 {
            return self.clone();
        }
        let samples = self
            .samples
            .chunks_exact(3)
            .map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2])
            .collect();
        ImageGrid { width: self.width, height: self.height, channels: 1, samples }
    }
}

impl<'a> ImageView<'a> {
    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.samples[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    fn at_clamped(&self, x: isize, y: isize, c: usize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.at(x, y, c)
    }

    pub fn in_bounds(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }

    /// Bilinear interpolation of channel 0; `None` outside the image.
    #[inline]
    pub fn bilinear_gray(&self, x: f64, y: f64) -> Option<f32> {
        if !self.in_bounds(x, y) {
            return None;
        }
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let c = self.channels;
        let s = self.samples;
        let w = self.width;
        let a = s[(y0 * w + x0) * c];
        let b = s[(y0 * w + x1) * c];
        let cc = s[(y1 * w + x0) * c];
        let d = s[(y1 * w + x1) * c];
        let top = a + (b - a) * fx;
        let bot = cc + (d - cc) * fx;
        Some(top + (bot - top) * fy)
    }

    /// Bilinear interpolation of every channel; unused channels are zero.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Result<[f32; 3], ImagingError> {
        if !self.in_bounds(x, y) {
            return Err(ImagingError::OutOfBounds { x, y });
        }
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let mut out = [0.0f32; 3];
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            let top = self.at(x0, y0, c) + (self.at(x1, y0, c) - self.at(x0, y0, c)) * fx;
            let bot = self.at(x0, y1, c) + (self.at(x1, y1, c) - self.at(x0, y1, c)) * fx;
            *o = top + (bot - top) * fy;
        }
        Ok(out)
    }

    pub fn to_owned(&self) -> ImageGrid {
        ImageGrid {
            width: self.width,
            height: self.height,
            channels: self.channels,
            samples: self.samples.to_vec(),
        }
    }
}

/// Half-resolution image by 2x2 box averaging; odd trailing rows/columns are
/// dropped.
pub fn downsample(img: ImageView<'_>) -> Result<ImageGrid, ImagingError> {
    let min = 2 * MIN_LEVEL_EDGE;
    if img.width < min || img.height < min {
        return Err(ImagingError::TooSmall { width: img.width, height: img.height, min });
    }
    let (w, h, ch) = (img.width / 2, img.height / 2, img.channels);
    let mut samples = Vec::with_capacity(w * h * ch);
    box_reduce(img, &mut samples);
    Ok(ImageGrid { width: w, height: h, channels: ch, samples })
}

fn box_reduce(img: ImageView<'_>, out: &mut Vec<f32>) {
    let (w, h, ch) = (img.width / 2, img.height / 2, img.channels);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let s = img.at(2 * x, 2 * y, c)
                    + img.at(2 * x + 1, 2 * y, c)
                    + img.at(2 * x, 2 * y + 1, c)
                    + img.at(2 * x + 1, 2 * y + 1, c);
                out.push(0.25 * s);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LevelSpan {
    width: usize,
    height: usize,
    offset: usize,
}

/// All pyramid levels packed into one contiguous arena so the whole stack
/// can be handed over in a single transfer.
#[derive(Debug, Clone)]
pub struct ScalePyramid {
    channels: usize,
    spans: Vec<LevelSpan>,
    arena: Vec<f32>,
}

impl ScalePyramid {
    pub fn level_count(&self) -> usize {
        self.spans.len()
    }

    pub fn level(&self, level: usize) -> ImageView<'_> {
        let s = self.spans[level];
        let len = s.width * s.height * self.channels;
        ImageView {
            width: s.width,
            height: s.height,
            channels: self.channels,
            samples: &self.arena[s.offset..s.offset + len],
        }
    }

    pub fn dims(&self, level: usize) -> (usize, usize) {
        (self.spans[level].width, self.spans[level].height)
    }

    /// Total number of stored samples including alignment padding.
    pub fn arena_len(&self) -> usize {
        self.arena.len()
    }

    /// Upper bound on the arena size: 4/3 of level 0 plus per-level padding
    /// slack.
    pub fn arena_bound(level0_samples: usize, level_count: usize) -> usize {
        (4 * level0_samples).div_ceil(3) + level_count * 64
    }
}

/// Builds a pyramid with `k` halvings (`k + 1` levels).
pub fn build_pyramid(img: &ImageGrid, k: usize) -> Result<ScalePyramid, ImagingError> {
    if k == 0 {
        return Err(ImagingError::NoLevels);
    }
    let min = MIN_LEVEL_EDGE << k;
    if img.width < min || img.height < min {
        return Err(ImagingError::TooSmall { width: img.width, height: img.height, min });
    }
    let ch = img.channels;
    let mut spans = Vec::with_capacity(k + 1);
    let (mut w, mut h, mut offset) = (img.width, img.height, 0usize);
    for _ in 0..=k {
        spans.push(LevelSpan { width: w, height: h, offset });
        offset += (w * h * ch).next_multiple_of(LEVEL_ALIGN);
        w /= 2;
        h /= 2;
    }
    let mut arena = Vec::with_capacity(offset);
    arena.extend_from_slice(&img.samples);
    for l in 1..=k {
        arena.resize(spans[l].offset, 0.0);
        let prev = spans[l - 1];
        let src: Vec<f32> = arena[prev.offset..prev.offset + prev.width * prev.height * ch].to_vec();
        let view = ImageView { width: prev.width, height: prev.height, channels: ch, samples: &src };
        box_reduce(view, &mut arena);
    }
    arena.resize(offset, 0.0);
    Ok(ScalePyramid { channels: ch, spans, arena })
}

/// 4-neighbour discrete Laplacian `4 I(p) - sum I(neighbours)` per channel
/// with clamp-to-edge borders. Unused channels are zero.
pub fn gradient(img: ImageView<'_>, x: usize, y: usize) -> [f32; 3] {
    let (xi, yi) = (x as isize, y as isize);
    let mut out = [0.0f32; 3];
    for (c, o) in out.iter_mut().enumerate().take(img.channels) {
        *o = 4.0 * img.at(x, y, c)
            - img.at_clamped(xi - 1, yi, c)
            - img.at_clamped(xi + 1, yi, c)
            - img.at_clamped(xi, yi - 1, c)
            - img.at_clamped(xi, yi + 1, c);
    }
    out
}

/// Laplacian of every pixel, same channel layout as the input.
pub fn laplacian_image(img: ImageView<'_>) -> ImageGrid {
    let mut samples = Vec::with_capacity(img.samples.len());
    for y in 0..img.height {
        for x in 0..img.width {
            let g = gradient(img, x, y);
            samples.extend_from_slice(&g[..img.channels]);
        }
    }
    ImageGrid { width: img.width, height: img.height, channels: img.channels, samples }
}
