//! The local student: frozen per-pixel features and a linear softmax decoder
//! trained with AdamW.

use alloc::vec;
use alloc::vec::Vec;

use crate::encoder;
use crate::math;
use crate::prng::Prng;
use crate::raster::{ClassMap, Label, Raster, IGNORE};
use crate::scenegen;

/// Features per pixel.
pub const FEATURES: usize = 10;

/// Fixed centring and scaling of each feature, measured once on the default
/// world so that every input has roughly unit spread.
const FEATURE_SHIFT: [f64; FEATURES] = [0.46, 0.03, 0.03, 0.46, 0.03, 0.03, 0.054, 0.054, 0.054, 0.009];
const FEATURE_SCALE: [f64; FEATURES] = [0.059, 0.089, 0.08, 0.032, 0.082, 0.071, 0.016, 0.016, 0.017, 0.008];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StudentError {
    #[error("feature dimension {got} does not match decoder dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label map is {got_w}x{got_h}, features are {want_w}x{want_h}")]
    ShapeMismatch { want_w: usize, want_h: usize, got_w: usize, got_h: usize },
    #[error("distillation weight {0} needs soft targets")]
    MissingSoftTargets(f64),
    #[error("alpha must lie in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("every pixel is IGNORE")]
    AllIgnored,
    #[error("label {0} is outside the decoder's classes")]
    LabelOutOfRange(Label),
    #[error("non-finite gradient at parameter {index}: {value}")]
    NonFinite { index: usize, value: f64 },
}

/// Per-pixel feature vectors, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// 3x3 mean and standard deviation of one plane, clamping at the edges.
fn local_stats(src: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let n = w * h;
    let mut s1 = vec![0.0; n];
    let mut s2 = vec![0.0; n];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let (a, b, c) = (row[x.saturating_sub(1)], row[x], row[(x + 1).min(w - 1)]);
            s1[y * w + x] = a + b + c;
            s2[y * w + x] = a * a + b * b + c * c;
        }
    }
    let mut mean = vec![0.0; n];
    let mut sd = vec![0.0; n];
    for y in 0..h {
        let (ya, yc) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            let m = (s1[ya * w + x] + s1[y * w + x] + s1[yc * w + x]) / 9.0;
            let q = (s2[ya * w + x] + s2[y * w + x] + s2[yc * w + x]) / 9.0;
            mean[y * w + x] = m;
            sd[y * w + x] = math::sqrt((q - m * m).max(0.0));
        }
    }
    (mean, sd)
}

/// The frozen feature extractor: colour, 3x3 colour means, 3x3 channel
/// standard deviations and band-pass energy, each standardized. Colour is
/// expressed as luminance plus two chroma axes (an invertible linear map of
/// RGB) so that hue differences are not buried under shared brightness
/// variation.
pub fn features(img: &Raster) -> FeatureMap {
    assert_eq!(img.channels(), 3, "features need a 3-channel image");
    let (w, h) = (img.width(), img.height());
    let n = w * h;
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let mut opp = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        let (u, v) = scenegen::chroma_of([r[i], g[i], b[i]]);
        opp[0][i] = (r[i] + g[i] + b[i]) / 3.0;
        opp[1][i] = u;
        opp[2][i] = v;
    }
    let mut planes: Vec<Vec<f64>> = Vec::with_capacity(FEATURES);
    let mut means = Vec::with_capacity(3);
    for p in &opp {
        means.push(local_stats(p, w, h).0);
    }
    let sds: Vec<Vec<f64>> = (0..3).map(|c| local_stats(img.plane(c), w, h).1).collect();
    let dog = {
        let enc = encoder::EncoderConfig::default();
        encoder::dog_energy(&opp[0], w, h, enc.dog_sigma_fine, enc.dog_sigma_coarse, enc.kernel_radius)
    };
    planes.extend(opp);
    planes.extend(means);
    planes.extend(sds);
    planes.push(dog);
    let mut values = vec![0.0; n * FEATURES];
    for (f, p) in planes.iter().enumerate() {
        let (shift, scale) = (FEATURE_SHIFT[f], FEATURE_SCALE[f]);
        for (i, &v) in p.iter().enumerate() {
            values[i * FEATURES + f] = (v - shift) / scale;
        }
    }
    FeatureMap { width: w, height: h, dim: FEATURES, values }
}

/// Unstandardized features, for measuring [`FEATURE_SHIFT`] and
/// [`FEATURE_SCALE`].
pub fn raw_feature_moments(img: &Raster) -> [(f64, f64); FEATURES] {
    let f = features(img);
    let mut out = [(0.0, 0.0); FEATURES];
    for (k, o) in out.iter_mut().enumerate() {
        let n = f.len() as f64;
        let vals = (0..f.len()).map(|i| f.values[i * FEATURES + k] * FEATURE_SCALE[k] + FEATURE_SHIFT[k]);
        let (s1, s2) = vals.fold((0.0, 0.0), |(a, b), v| (a + v, b + v * v));
        let m = s1 / n;
        *o = (m, math::sqrt((s2 / n - m * m).max(0.0)));
    }
    out
}

/// Linear softmax classifier; `weights[f * k + c]` maps feature `f` to class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDecoder {
    pub k: usize,
    pub f: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Per-pixel class probabilities, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Probabilities {
    pub k: usize,
    pub values: Vec<f64>,
}

impl Probabilities {
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }
}

/// Gradient of a loss with respect to the decoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros(k: usize, f: usize) -> Self {
        Gradients { weights: vec![0.0; k * f], bias: vec![0.0; k] }
    }

    pub fn add_scaled(&mut self, other: &Gradients, a: f64) {
        for (x, y) in self.weights.iter_mut().zip(&other.weights) {
            *x += a * y;
        }
        for (x, y) in self.bias.iter_mut().zip(&other.bias) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.weights.iter_mut().chain(self.bias.iter_mut()).for_each(|x| *x *= a);
    }

    pub fn norm(&self) -> f64 {
        math::sqrt(self.weights.iter().chain(&self.bias).map(|x| x * x).sum())
    }
}

impl LinearDecoder {
    pub fn zeros(k: usize, f: usize) -> Self {
        LinearDecoder { k, f, weights: vec![0.0; k * f], bias: vec![0.0; k] }
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Parameter `i` in weights-then-bias order.
    pub fn param(&self, i: usize) -> f64 {
        if i < self.weights.len() {
            self.weights[i]
        } else {
            self.bias[i - self.weights.len()]
        }
    }

    pub fn param_mut(&mut self, i: usize) -> &mut f64 {
        let nw = self.weights.len();
        if i < nw {
            &mut self.weights[i]
        } else {
            &mut self.bias[i - nw]
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    fn logits_into(&self, phi: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (f, &x) in phi.iter().enumerate() {
            let row = &self.weights[f * self.k..(f + 1) * self.k];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * x;
            }
        }
    }

    /// Class-major copy of the weights, for the per-pixel hot loops.
    fn kernel(&self) -> Kernel {
        let mut rows = vec![[0.0; FEATURES]; self.k];
        for (c, row) in rows.iter_mut().enumerate() {
            for (f, w) in row.iter_mut().enumerate() {
                *w = self.weights[f * self.k + c];
            }
        }
        Kernel { rows, bias: self.bias.clone() }
    }

    pub fn forward(&self, feats: &FeatureMap) -> Result<Probabilities, StudentError> {
        if feats.dim != self.f {
            return Err(StudentError::DimensionMismatch { expected: self.f, got: feats.dim });
        }
        let n = feats.len();
        let mut values = vec![0.0; n * self.k];
        let kernel = (self.f == FEATURES).then(|| self.kernel());
        for (i, out) in values.chunks_exact_mut(self.k).enumerate() {
            match &kernel {
                Some(kr) => kr.logits_into(fixed(feats.pixel(i)), out),
                None => self.logits_into(feats.pixel(i), out),
            }
            softmax_in_place(out);
        }
        Ok(Probabilities { k: self.k, values })
    }

    /// Hard prediction: per-pixel argmax (first maximum on ties).
    pub fn predict(&self, feats: &FeatureMap) -> Result<ClassMap, StudentError> {
        if feats.dim != self.f {
            return Err(StudentError::DimensionMismatch { expected: self.f, got: feats.dim });
        }
        let mut logits = vec![0.0; self.k];
        let kernel = (self.f == FEATURES).then(|| self.kernel());
        let labels = (0..feats.len())
            .map(|i| {
                match &kernel {
                    Some(kr) => kr.logits_into(fixed(feats.pixel(i)), &mut logits),
                    None => self.logits_into(feats.pixel(i), &mut logits),
                }
                let mut best = 0;
                for c in 1..self.k {
                    if logits[c] > logits[best] {
                        best = c;
                    }
                }
                best as Label
            })
            .collect();
        Ok(ClassMap::new(feats.width, feats.height, labels).expect("feature map shape"))
    }
}

fn fixed(phi: &[f64]) -> &[f64; FEATURES] {
    phi.try_into().expect("pixel feature width")
}

struct Kernel {
    rows: Vec<[f64; FEATURES]>,
    bias: Vec<f64>,
}

impl Kernel {
    #[inline]
    fn logits_into(&self, phi: &[f64; FEATURES], out: &mut [f64]) {
        for ((o, row), &b) in out.iter_mut().zip(&self.rows).zip(&self.bias) {
            let mut z = b;
            for f in 0..FEATURES {
                z += row[f] * phi[f];
            }
            *o = z;
        }
    }
}

pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = math::exp(*v - max);
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in z.iter_mut() {
        *v *= inv;
    }
}

/// Hard-label cross-entropy and its gradient in one pass, without keeping
/// the probabilities. Equal to [`loss_kd`] with `α = 0`.
pub fn loss_ce(decoder: &LinearDecoder, feats: &FeatureMap, labels: &ClassMap) -> Result<(f64, Gradients), StudentError> {
    if feats.dim != decoder.f {
        return Err(StudentError::DimensionMismatch { expected: decoder.f, got: feats.dim });
    }
    if labels.width() != feats.width || labels.height() != feats.height {
        return Err(StudentError::ShapeMismatch {
            want_w: feats.width,
            want_h: feats.height,
            got_w: labels.width(),
            got_h: labels.height(),
        });
    }
    let k = decoder.k;
    let mut grads = Gradients::zeros(k, decoder.f);
    let mut loss = 0.0;
    let mut count = 0usize;
    let mut p = vec![0.0; k];
    let kernel = (decoder.f == FEATURES).then(|| decoder.kernel());
    // Class-major gradient accumulator for the fixed-width path.
    let mut gk = vec![[0.0; FEATURES]; k];
    for (i, &y) in labels.labels().iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        if y as usize >= k {
            return Err(StudentError::LabelOutOfRange(y));
        }
        count += 1;
        let phi = feats.pixel(i);
        match &kernel {
            Some(kr) => kr.logits_into(fixed(phi), &mut p),
            None => decoder.logits_into(phi, &mut p),
        }
        softmax_in_place(&mut p);
        loss -= math::ln(p[y as usize].max(f64::MIN_POSITIVE));
        p[y as usize] -= 1.0;
        if kernel.is_some() {
            let phi = fixed(phi);
            for (row, &d) in gk.iter_mut().zip(&p) {
                for f in 0..FEATURES {
                    row[f] += d * phi[f];
                }
            }
        } else {
            for (f, &x) in phi.iter().enumerate() {
                let row = &mut grads.weights[f * k..(f + 1) * k];
                for (g, &d) in row.iter_mut().zip(&p) {
                    *g += d * x;
                }
            }
        }
        for (g, &d) in grads.bias.iter_mut().zip(&p) {
            *g += d;
        }
    }
    if kernel.is_some() {
        for (c, row) in gk.iter().enumerate() {
            for (f, &g) in row.iter().enumerate() {
                grads.weights[f * k + c] = g;
            }
        }
    }
    if count == 0 {
        return Err(StudentError::AllIgnored);
    }
    let inv = 1.0 / count as f64;
    grads.scale(inv);
    Ok((loss * inv, grads))
}

/// `α·KL(p_t ‖ p_s) + (1 − α)·CE(p_s, labels)`, averaged over non-IGNORE
/// pixels, with its exact gradient. With `α = 0` only hard labels are used.
pub fn loss_kd(
    decoder: &LinearDecoder,
    feats: &FeatureMap,
    probs: &Probabilities,
    labels: &ClassMap,
    soft: Option<&Probabilities>,
    alpha: f64,
) -> Result<(f64, Gradients), StudentError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(StudentError::BadAlpha(alpha));
    }
    if alpha > 0.0 && soft.is_none() {
        return Err(StudentError::MissingSoftTargets(alpha));
    }
    if labels.width() != feats.width || labels.height() != feats.height {
        return Err(StudentError::ShapeMismatch {
            want_w: feats.width,
            want_h: feats.height,
            got_w: labels.width(),
            got_h: labels.height(),
        });
    }
    let k = decoder.k;
    let mut grads = Gradients::zeros(k, decoder.f);
    let mut loss = 0.0;
    let mut count = 0usize;
    let mut dz = vec![0.0; k];
    for (i, &y) in labels.labels().iter().enumerate() {
        if y == IGNORE {
            continue;
        }
        if y as usize >= k {
            return Err(StudentError::LabelOutOfRange(y));
        }
        count += 1;
        let p = probs.pixel(i);
        for c in 0..k {
            dz[c] = (1.0 - alpha) * p[c];
        }
        dz[y as usize] -= 1.0 - alpha;
        if alpha < 1.0 {
            loss -= (1.0 - alpha) * math::ln(p[y as usize].max(f64::MIN_POSITIVE));
        }
        if alpha > 0.0 {
            let t = soft.expect("checked above").pixel(i);
            for c in 0..k {
                if t[c] > 0.0 {
                    loss += alpha * t[c] * (math::ln(t[c]) - math::ln(p[c].max(f64::MIN_POSITIVE)));
                }
                dz[c] += alpha * (p[c] - t[c]);
            }
        }
        for (f, &x) in feats.pixel(i).iter().enumerate() {
            let row = &mut grads.weights[f * k..(f + 1) * k];
            for (g, &d) in row.iter_mut().zip(&dz) {
                *g += d * x;
            }
        }
        for (g, &d) in grads.bias.iter_mut().zip(&dz) {
            *g += d;
        }
    }
    if count == 0 {
        return Err(StudentError::AllIgnored);
    }
    let inv = 1.0 / count as f64;
    grads.scale(inv);
    Ok((loss * inv, grads))
}

/// AdamW moments and schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Schedule length `T`; the rate at iteration `t` is
    /// `base_lr * (1 - t/T)^power`.
    pub total_iters: u64,
    pub power: f64,
}

impl OptimizerState {
    pub fn new(num_params: usize, base_lr: f64, weight_decay: f64, total_iters: u64) -> Self {
        OptimizerState {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            base_lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_iters,
            power: 0.9,
        }
    }

    pub fn lr_at(&self, iter: u64) -> f64 {
        if self.total_iters == 0 {
            return self.base_lr;
        }
        let frac = 1.0 - (iter.min(self.total_iters) as f64) / self.total_iters as f64;
        self.base_lr * math::powf(frac, self.power)
    }
}

/// One AdamW update at schedule position `iter`. Weight decay is decoupled
/// and applies to weights, not biases.
pub fn step(decoder: &mut LinearDecoder, grads: &Gradients, opt: &mut OptimizerState, iter: u64) -> Result<(), StudentError> {
    let nw = decoder.weights.len();
    for (index, &value) in grads.weights.iter().chain(&grads.bias).enumerate() {
        if !value.is_finite() {
            return Err(StudentError::NonFinite { index, value });
        }
    }
    opt.step += 1;
    let lr = opt.lr_at(iter);
    let bc1 = 1.0 - math::powf(opt.beta1, opt.step as f64);
    let bc2 = 1.0 - math::powf(opt.beta2, opt.step as f64);
    for i in 0..decoder.num_params() {
        let g = if i < nw { grads.weights[i] } else { grads.bias[i - nw] };
        opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * g;
        opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * g * g;
        let mhat = opt.m[i] / bc1;
        let vhat = opt.v[i] / bc2;
        let decay = if i < nw { opt.weight_decay } else { 0.0 };
        let p = decoder.param_mut(i);
        *p -= lr * (mhat / (math::sqrt(vhat) + opt.eps) + decay * *p);
    }
    Ok(())
}

/// Largest relative error between the analytic gradient and central
/// differences with step `1e-5`, over `samples` random parameters.
pub fn grad_check(
    decoder: &LinearDecoder,
    feats: &FeatureMap,
    labels: &ClassMap,
    soft: Option<&Probabilities>,
    alpha: f64,
    samples: usize,
    rng: &mut Prng,
) -> Result<f64, StudentError> {
    let probs = decoder.forward(feats)?;
    let (_, grads) = loss_kd(decoder, feats, &probs, labels, soft, alpha)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let nw = decoder.weights.len();
    for _ in 0..samples {
        let i = rng.below(decoder.num_params() as u64) as usize;
        let mut d = decoder.clone();
        let base = d.param(i);
        *d.param_mut(i) = base + h;
        let up = loss_kd(&d, feats, &d.forward(feats)?, labels, soft, alpha)?.0;
        *d.param_mut(i) = base - h;
        let down = loss_kd(&d, feats, &d.forward(feats)?, labels, soft, alpha)?.0;
        let numeric = (up - down) / (2.0 * h);
        let analytic = if i < nw { grads.weights[i] } else { grads.bias[i - nw] };
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-7);
        worst = worst.max(rel);
    }
    Ok(worst)
}
