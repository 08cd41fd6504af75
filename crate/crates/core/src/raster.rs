//! Raster and label-map containers with the geometric transforms used
//! throughout the pipeline: rescaling by a factor, rescaling to explicit
//! dimensions, and cropping.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

/// Class index stored in a [`ClassMap`].
pub type Label = u16;

/// Label for pixels that carry no class and are excluded from every score.
pub const IGNORE: Label = Label::MAX;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RasterError {
    #[error("scale factor must be positive and finite, got {0}")]
    NonPositiveScale(f64),
    #[error("rescaling {width}x{height} by {scale} yields an empty raster")]
    ZeroDimension { width: usize, height: usize, scale: f64 },
    #[error("crop {rect:?} exceeds {width}x{height}")]
    OutOfBounds { rect: CropRect, width: usize, height: usize },
    #[error("value buffer has {actual} entries, expected {expected}")]
    BadLength { expected: usize, actual: usize },
    #[error("raster dimensions must be positive")]
    EmptyShape,
    #[error("one-hot raster pixel ({x}, {y}) is not one-hot")]
    NotOneHot { x: usize, y: usize },
}

/// Resampling kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

/// Output length for scaling `n` pixels by `s`: round half up.
pub fn scaled_len(n: usize, s: f64) -> usize {
    math::round_half_up(n as f64 * s) as usize
}

fn check_scale(s: f64) -> Result<(), RasterError> {
    if s.is_finite() && s > 0.0 {
        Ok(())
    } else {
        Err(RasterError::NonPositiveScale(s))
    }
}

/// Row-major, channel-planar grid of 64-bit values.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, values: Vec<f64>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(RasterError::EmptyShape);
        }
        let expected = width * height * channels;
        if values.len() != expected {
            return Err(RasterError::BadLength { expected, actual: values.len() });
        }
        Ok(Raster { width, height, channels, values })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0 && channels > 0, "empty raster");
        Raster { width, height, channels, values: vec![value; width * height * channels] }
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

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// One channel plane.
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.values[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.values[(c * self.height + y) * self.width + x] = v;
    }

    /// Mean over channels, as a single-channel raster.
    pub fn mean_channels(&self) -> Raster {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.width * self.height;
        let mut out = vec![0.0; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.channels as f64;
        for o in &mut out {
            *o *= inv;
        }
        Raster { width: self.width, height: self.height, channels: 1, values: out }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Rescale by `s`; output dimensions are `round(width*s) x round(height*s)`.
    pub fn resize(&self, s: f64, mode: Interp) -> Result<Raster, RasterError> {
        check_scale(s)?;
        let w = scaled_len(self.width, s);
        let h = scaled_len(self.height, s);
        if w == 0 || h == 0 {
            return Err(RasterError::ZeroDimension { width: self.width, height: self.height, scale: s });
        }
        Ok(self.resize_to(w, h, mode))
    }

    /// Rescale to explicit dimensions using half-pixel-center sampling.
    pub fn resize_to(&self, width: usize, height: usize, mode: Interp) -> Raster {
        assert!(width > 0 && height > 0, "resize_to an empty shape");
        if width == self.width && height == self.height {
            return self.clone();
        }
        match mode {
            Interp::Nearest => {
                let xs = nearest_indices(self.width, width);
                let ys = nearest_indices(self.height, height);
                let mut values = Vec::with_capacity(width * height * self.channels);
                for c in 0..self.channels {
                    let src = self.plane(c);
                    for &sy in &ys {
                        let row = &src[sy * self.width..(sy + 1) * self.width];
                        values.extend(xs.iter().map(|&sx| row[sx]));
                    }
                }
                Raster { width, height, channels: self.channels, values }
            }
            Interp::Bilinear => {
                let xs = bilinear_taps(self.width, width);
                let ys = bilinear_taps(self.height, height);
                let mut values = Vec::with_capacity(width * height * self.channels);
                for c in 0..self.channels {
                    let src = self.plane(c);
                    for &(y0, y1, fy) in &ys {
                        let r0 = &src[y0 * self.width..(y0 + 1) * self.width];
                        let r1 = &src[y1 * self.width..(y1 + 1) * self.width];
                        for &(x0, x1, fx) in &xs {
                            let top = lerp(r0[x0], r0[x1], fx);
                            let bottom = lerp(r1[x0], r1[x1], fx);
                            values.push(lerp(top, bottom, fy));
                        }
                    }
                }
                Raster { width, height, channels: self.channels, values }
            }
        }
    }

    pub fn crop(&self, rect: CropRect) -> Result<Raster, RasterError> {
        rect.check_within(self.width, self.height)?;
        let mut values = Vec::with_capacity(rect.w * rect.h * self.channels);
        for c in 0..self.channels {
            let src = self.plane(c);
            for y in rect.y..rect.y + rect.h {
                let start = y * self.width + rect.x;
                values.extend_from_slice(&src[start..start + rect.w]);
            }
        }
        Ok(Raster { width: rect.w, height: rect.h, channels: self.channels, values })
    }
}

/// `a + (b - a) * t`, clamped to the segment so constants stay exact and the
/// result never leaves `[min(a,b), max(a,b)]`.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    let v = a + (b - a) * t;
    if a <= b {
        v.clamp(a, b)
    } else {
        v.clamp(b, a)
    }
}

/// Source index of the nearest source pixel center for each output pixel,
/// in exact integer arithmetic: floor((2i + 1) * src / (2 * dst)).
fn nearest_indices(src: usize, dst: usize) -> Vec<usize> {
    (0..dst)
        .map(|i| (((2 * i + 1) * src) / (2 * dst)).min(src - 1))
        .collect()
}

fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src as f64 / dst as f64;
    let max = (src - 1) as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, max);
            let i0 = math::floor(pos) as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Per-pixel class indices; the canonical form of a one-hot mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClassMap {
    width: usize,
    height: usize,
    labels: Vec<Label>,
}

impl ClassMap {
    pub fn new(width: usize, height: usize, labels: Vec<Label>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyShape);
        }
        if labels.len() != width * height {
            return Err(RasterError::BadLength { expected: width * height, actual: labels.len() });
        }
        Ok(ClassMap { width, height, labels })
    }

    pub fn filled(width: usize, height: usize, label: Label) -> Self {
        assert!(width > 0 && height > 0, "empty class map");
        ClassMap { width, height, labels: vec![label; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [Label] {
        &mut self.labels
    }

    pub fn into_labels(self) -> Vec<Label> {
        self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Label {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: Label) {
        self.labels[y * self.width + x] = label;
    }

    /// Largest non-IGNORE label, if any.
    pub fn max_label(&self) -> Option<Label> {
        self.labels.iter().copied().filter(|&l| l != IGNORE).max()
    }

    /// Nearest-neighbour rescale by `s`; labels are never blended.
    pub fn resize(&self, s: f64) -> Result<ClassMap, RasterError> {
        check_scale(s)?;
        let w = scaled_len(self.width, s);
        let h = scaled_len(self.height, s);
        if w == 0 || h == 0 {
            return Err(RasterError::ZeroDimension { width: self.width, height: self.height, scale: s });
        }
        Ok(self.resize_to(w, h))
    }

    pub fn resize_to(&self, width: usize, height: usize) -> ClassMap {
        assert!(width > 0 && height > 0, "resize_to an empty shape");
        if width == self.width && height == self.height {
            return self.clone();
        }
        let xs = nearest_indices(self.width, width);
        let ys = nearest_indices(self.height, height);
        let mut labels = Vec::with_capacity(width * height);
        for &sy in &ys {
            let row = &self.labels[sy * self.width..(sy + 1) * self.width];
            labels.extend(xs.iter().map(|&sx| row[sx]));
        }
        ClassMap { width, height, labels }
    }

    pub fn crop(&self, rect: CropRect) -> Result<ClassMap, RasterError> {
        rect.check_within(self.width, self.height)?;
        let mut labels = Vec::with_capacity(rect.w * rect.h);
        for y in rect.y..rect.y + rect.h {
            let start = y * self.width + rect.x;
            labels.extend_from_slice(&self.labels[start..start + rect.w]);
        }
        Ok(ClassMap { width: rect.w, height: rect.h, labels })
    }

    /// Expand to a `k`-channel {0,1} raster. IGNORE pixels are all-zero.
    pub fn to_one_hot(&self, k: usize) -> Raster {
        let n = self.width * self.height;
        let mut values = vec![0.0; n * k];
        for (i, &l) in self.labels.iter().enumerate() {
            if l != IGNORE {
                assert!((l as usize) < k, "label {l} out of range for k = {k}");
                values[l as usize * n + i] = 1.0;
            }
        }
        Raster { width: self.width, height: self.height, channels: k, values }
    }

    /// Collapse a one-hot raster; all-zero pixels become IGNORE.
    pub fn from_one_hot(r: &Raster) -> Result<ClassMap, RasterError> {
        let n = r.width * r.height;
        let mut labels = vec![IGNORE; n];
        for (i, label) in labels.iter_mut().enumerate() {
            let mut hot = None;
            for c in 0..r.channels {
                let v = r.values[c * n + i];
                if v == 1.0 && hot.is_none() {
                    hot = Some(c as Label);
                } else if v != 0.0 {
                    return Err(RasterError::NotOneHot { x: i % r.width, y: i / r.width });
                }
            }
            if let Some(h) = hot {
                *label = h;
            }
        }
        Ok(ClassMap { width: r.width, height: r.height, labels })
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl CropRect {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        CropRect { x, y, w, h }
    }

    pub fn full(width: usize, height: usize) -> Self {
        CropRect { x: 0, y: 0, w: width, h: height }
    }

    pub fn check_within(&self, width: usize, height: usize) -> Result<(), RasterError> {
        if self.w == 0 || self.h == 0 || self.x + self.w > width || self.y + self.h > height {
            Err(RasterError::OutOfBounds { rect: *self, width, height })
        } else {
            Ok(())
        }
    }
}
