//! Band-pass attention encoder.
//!
//! A difference-of-Gaussians filter on the grayscale image, rectified and
//! pooled over `P x P` patches. Its response to a textured region peaks when
//! the texture's blob size matches the filter band, which makes the entropy
//! of the pooled map depend on the scale an image is presented at.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::raster::Raster;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncoderError {
    #[error("image {width}x{height} is smaller than one {patch}x{patch} patch")]
    TooSmall { width: usize, height: usize, patch: usize },
    #[error("expected a 3-channel image, got {0} channels")]
    Channels(usize),
    #[error("invalid encoder config: {0}")]
    Config(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub dog_sigma_fine: f64,
    pub dog_sigma_coarse: f64,
    pub kernel_radius: usize,
    /// Number of averaged heads with jittered bands; 1 is the plain filter.
    pub heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { patch_size: 8, dog_sigma_fine: 1.0, dog_sigma_coarse: 2.0, kernel_radius: 5, heads: 1 }
    }
}

/// Relative sigma jitter of each head.
const HEAD_JITTER: [f64; 4] = [0.0, -0.1, 0.1, 0.2];

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.patch_size == 0 {
            return Err(EncoderError::Config("patch_size must be positive"));
        }
        if !(self.dog_sigma_fine > 0.0 && self.dog_sigma_fine < self.dog_sigma_coarse) {
            return Err(EncoderError::Config("need 0 < dog_sigma_fine < dog_sigma_coarse"));
        }
        if self.kernel_radius == 0 {
            return Err(EncoderError::Config("kernel_radius must be positive"));
        }
        if !(1..=HEAD_JITTER.len()).contains(&self.heads) {
            return Err(EncoderError::Config("heads must be between 1 and 4"));
        }
        Ok(())
    }

    /// Stable 64-bit digest of the configuration.
    pub fn digest(&self) -> u64 {
        let mut h = math::Hasher64::new();
        h.write_u64(self.patch_size as u64);
        h.write_u64(self.dog_sigma_fine.to_bits());
        h.write_u64(self.dog_sigma_coarse.to_bits());
        h.write_u64(self.kernel_radius as u64);
        h.write_u64(self.heads as u64);
        h.finish()
    }

    /// Patch-grid dimensions for a `width x height` image.
    pub fn grid_dims(&self, width: usize, height: usize) -> (usize, usize) {
        (width.div_ceil(self.patch_size), height.div_ceil(self.patch_size))
    }
}

/// Normalized 1-D Gaussian taps over `[-radius, radius]`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| math::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable convolution with zero padding.
/// Blur with the difference kernel `fine - coarse` in one separable sweep
/// per kernel, zero padded. Both kernels are symmetric, so each tap pair is
/// summed before the multiply.
fn dog_blur(src: &[f64], width: usize, height: usize, fine: &[f64], coarse: &[f64]) -> Vec<f64> {
    let r = fine.len() / 2;
    let n = width * height;
    let mut hf = vec![0.0; n];
    let mut hc = vec![0.0; n];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for x in 0..width {
            let (mut a, mut b) = (row[x] * fine[r], row[x] * coarse[r]);
            if x >= r && x + r < width {
                for i in 1..=r {
                    let p = row[x - i] + row[x + i];
                    a += p * fine[r + i];
                    b += p * coarse[r + i];
                }
            } else {
                for i in 1..=r {
                    let mut p = 0.0;
                    if x >= i {
                        p += row[x - i];
                    }
                    if x + i < width {
                        p += row[x + i];
                    }
                    a += p * fine[r + i];
                    b += p * coarse[r + i];
                }
            }
            hf[y * width + x] = a;
            hc[y * width + x] = b;
        }
    }
    let mut out = vec![0.0; n];
    for y in 0..height {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(height - 1);
        let dst = &mut out[y * width..(y + 1) * width];
        for yy in lo..=hi {
            let (kf, kc) = (fine[yy + r - y], coarse[yy + r - y]);
            let rf = &hf[yy * width..(yy + 1) * width];
            let rc = &hc[yy * width..(yy + 1) * width];
            for ((d, &f), &c) in dst.iter_mut().zip(rf).zip(rc) {
                *d += kf * f - kc * c;
            }
        }
    }
    out
}

/// Rectified band-pass response at full resolution, single channel.
///
/// The image mean is removed before zero padding so the padded border reads
/// as "average grey" rather than as a hard step to black.
pub fn dog_energy(gray: &[f64], width: usize, height: usize, fine: f64, coarse: f64, radius: usize) -> Vec<f64> {
    let n = width * height;
    let (lo, hi) = gray.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if lo == hi {
        return vec![0.0; n];
    }
    let mean = gray.iter().sum::<f64>() / n as f64;
    let centred: Vec<f64> = gray.iter().map(|v| v - mean).collect();
    let mut out = dog_blur(&centred, width, height, &gaussian_kernel(fine, radius), &gaussian_kernel(coarse, radius));
    for v in &mut out {
        *v = v.abs();
    }
    out
}

/// Mean of `values` over each `patch x patch` cell; edge cells average the
/// pixels they actually contain.
pub fn pool_patches(values: &[f64], width: usize, height: usize, patch: usize) -> Raster {
    let gw = width.div_ceil(patch);
    let gh = height.div_ceil(patch);
    let mut sums = vec![0.0; gw * gh];
    for y in 0..height {
        let row = &values[y * width..(y + 1) * width];
        let cells = &mut sums[(y / patch) * gw..(y / patch + 1) * gw];
        for (x, &v) in row.iter().enumerate() {
            cells[x / patch] += v;
        }
    }
    for gy in 0..gh {
        let ch = ((gy + 1) * patch).min(height) - gy * patch;
        for gx in 0..gw {
            let cw = ((gx + 1) * patch).min(width) - gx * patch;
            sums[gy * gw + gx] /= (cw * ch) as f64;
        }
    }
    Raster::new(gw, gh, 1, sums).expect("non-empty grid")
}

/// The attention map of a 3-channel image.
pub fn attend(img: &Raster, cfg: &EncoderConfig) -> Result<Raster, EncoderError> {
    if img.channels() != 3 {
        return Err(EncoderError::Channels(img.channels()));
    }
    attend_gray(&img.mean_channels(), cfg)
}

/// The attention map of an already grey single-channel image.
pub fn attend_gray(gray: &Raster, cfg: &EncoderConfig) -> Result<Raster, EncoderError> {
    cfg.validate()?;
    if gray.channels() != 1 {
        return Err(EncoderError::Channels(gray.channels()));
    }
    let (w, h) = (gray.width(), gray.height());
    if w < cfg.patch_size || h < cfg.patch_size {
        return Err(EncoderError::TooSmall { width: w, height: h, patch: cfg.patch_size });
    }
    let mut acc: Option<Raster> = None;
    for j in &HEAD_JITTER[..cfg.heads] {
        let e = dog_energy(
            gray.values(),
            w,
            h,
            cfg.dog_sigma_fine * (1.0 + j),
            cfg.dog_sigma_coarse * (1.0 + j),
            cfg.kernel_radius,
        );
        let map = pool_patches(&e, w, h, cfg.patch_size);
        acc = Some(match acc {
            None => map,
            Some(mut sum) => {
                for (s, v) in sum.values_mut().iter_mut().zip(map.values()) {
                    *s += v;
                }
                sum
            }
        });
    }
    let mut map = acc.expect("at least one head");
    if cfg.heads > 1 {
        let inv = 1.0 / cfg.heads as f64;
        for v in map.values_mut() {
            *v *= inv;
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Interp;

    /// Direct 2-D convolution with the full DoG kernel, zero padded.
    fn direct_dog(gray: &[f64], w: usize, h: usize, cfg: &EncoderConfig) -> Vec<f64> {
        let mean = gray.iter().sum::<f64>() / (w * h) as f64;
        let g1 = gaussian_kernel(cfg.dog_sigma_fine, cfg.kernel_radius);
        let g2 = gaussian_kernel(cfg.dog_sigma_coarse, cfg.kernel_radius);
        let r = cfg.kernel_radius as isize;
        let mut out = vec![0.0; w * h];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (sx, sy) = (x + dx, y + dy);
                        if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                            continue;
                        }
                        let k = g1[(dy + r) as usize] * g1[(dx + r) as usize]
                            - g2[(dy + r) as usize] * g2[(dx + r) as usize];
                        acc += k * (gray[sy as usize * w + sx as usize] - mean);
                    }
                }
                out[y as usize * w + x as usize] = acc.abs();
            }
        }
        out
    }

    fn textured_disc(size: usize, cx: f64, cy: f64, radius: f64, period: f64) -> Raster {
        let mut img = Raster::filled(size, size, 3, 0.5);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= radius * radius {
                    let t = 0.5 + 0.3 * math::cos(2.0 * core::f64::consts::PI * (x as f64) / period)
                        * math::cos(2.0 * core::f64::consts::PI * (y as f64) / period);
                    for c in 0..3 {
                        img.set(x, y, c, t);
                    }
                }
            }
        }
        img
    }

    #[test]
    fn separable_matches_direct_convolution() {
        let cfg = EncoderConfig::default();
        let mut rng = crate::Prng::new(11);
        let (w, h) = (23, 17);
        let gray: Vec<f64> = (0..w * h).map(|_| rng.next_f64()).collect();
        let fast = dog_energy(&gray, w, h, 1.0, 2.0, 5);
        let slow = direct_dog(&gray, w, h, &cfg);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_image_gives_exact_zero() {
        let img = Raster::filled(40, 24, 3, 0.37);
        let map = attend(&img, &EncoderConfig::default()).unwrap();
        assert_eq!((map.width(), map.height()), (5, 3));
        assert!(map.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grid_dims_round_up() {
        let img = Raster::filled(36, 20, 3, 0.1);
        let map = attend(&img, &EncoderConfig::default()).unwrap();
        assert_eq!((map.width(), map.height()), (5, 3));
        assert!(matches!(
            attend(&Raster::filled(7, 20, 3, 0.0), &EncoderConfig::default()),
            Err(EncoderError::TooSmall { .. })
        ));
    }

    #[test]
    fn argmax_patch_holds_ellipse_centre() {
        let cfg = EncoderConfig::default();
        let img = textured_disc(64, 36.0, 28.0, 8.0, 8.0);
        let map = attend(&img, &cfg).unwrap();
        // Oracle: pool the directly convolved response and locate the peak.
        let gray = img.mean_channels();
        let slow = pool_patches(&direct_dog(gray.values(), 64, 64, &cfg), 64, 64, 8);
        let argmax = |r: &Raster| {
            let v = r.values();
            (0..v.len()).max_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap()).unwrap()
        };
        assert_eq!(argmax(&map), argmax(&slow));
        let best = argmax(&map);
        assert_eq!((best % 8, best / 8), (36 / 8, 28 / 8));
    }

    #[test]
    fn response_depends_on_apparent_size() {
        // The same texture drawn into a 4x4 and a 16x16 footprint.
        let cfg = EncoderConfig::default();
        let small = textured_disc(32, 16.0, 16.0, 2.0, 4.0);
        let large = textured_disc(32, 16.0, 16.0, 8.0, 4.0);
        let a = attend(&small, &cfg).unwrap();
        let b = attend(&large, &cfg).unwrap();
        let centre = |r: &Raster| r.get(1, 1, 0) + r.get(2, 2, 0) + r.get(1, 2, 0) + r.get(2, 1, 0);
        assert!(centre(&b) > 1.5 * centre(&a), "{} vs {}", centre(&b), centre(&a));
    }

    #[test]
    fn translation_by_one_patch_shifts_map() {
        let cfg = EncoderConfig::default();
        let mut rng = crate::Prng::new(4);
        let big: Vec<f64> = (0..96 * 64).map(|_| rng.next_f64()).collect();
        let big = Raster::new(96, 64, 1, big).unwrap();
        let mk = |x0: usize| {
            let g = big.crop(crate::raster::CropRect::new(x0, 0, 80, 64)).unwrap();
            let mut v = g.values().to_vec();
            v.extend_from_slice(g.values());
            v.extend_from_slice(g.values());
            Raster::new(80, 64, 3, v).unwrap()
        };
        let a = attend(&mk(0), &cfg).unwrap();
        let b = attend(&mk(8), &cfg).unwrap();
        // Interior cells only: away from padded borders; tolerance covers the
        // shift of the removed mean.
        for gy in 2..6 {
            for gx in 2..7 {
                let (va, vb) = (a.get(gx + 1, gy, 0), b.get(gx, gy, 0));
                assert!((va - vb).abs() < 0.02 * va.max(vb) + 1e-3, "{gx},{gy}: {va} {vb}");
            }
        }
    }

    #[test]
    fn heads_average_and_validate() {
        let img = textured_disc(32, 16.0, 16.0, 8.0, 4.0);
        let cfg = EncoderConfig { heads: 3, ..EncoderConfig::default() };
        let map = attend(&img, &cfg).unwrap();
        assert!(map.values().iter().all(|&v| v >= 0.0));
        assert!(attend(&img, &EncoderConfig { heads: 0, ..cfg.clone() }).is_err());
        assert!(attend(&img, &EncoderConfig { dog_sigma_fine: 3.0, ..cfg }).is_err());
    }

    #[test]
    fn object_mass_peaks_at_interior_scale() {
        // Blob texture tuned to the filter at scale 1: attention mass inside
        // the object, over the whole scale set, peaks away from the ends.
        let cfg = EncoderConfig::default();
        let scales = crate::atgc::ScaleSet::default();
        let mut rng = crate::Prng::new(9);
        let size = 64;
        let mut img = Raster::filled(size, size, 3, 0.45);
        let sigma = core::f64::consts::SQRT_2;
        for _ in 0..40 {
            let (cx, cy) = (rng.uniform(16.0, 48.0), rng.uniform(16.0, 48.0));
            for y in 16..48 {
                for x in 16..48 {
                    let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                    for c in 0..3 {
                        let v = img.get(x, y, c) + 0.2 * math::exp(-d2 / (2.0 * sigma * sigma));
                        img.set(x, y, c, v);
                    }
                }
            }
        }
        let mut fractions = Vec::new();
        for &s in scales.scales() {
            let scaled = img.resize(s, Interp::Bilinear).unwrap();
            if scaled.width() < cfg.patch_size {
                fractions.push(0.0);
                continue;
            }
            let map = attend(&scaled, &cfg).unwrap().resize_to(8, 8, Interp::Bilinear);
            let total: f64 = map.values().iter().sum();
            let inside: f64 = (2..6).flat_map(|y| (2..6).map(move |x| (x, y))).map(|(x, y)| map.get(x, y, 0)).sum();
            fractions.push(inside / total);
        }
        let best = (0..fractions.len()).max_by(|&a, &b| fractions[a].partial_cmp(&fractions[b]).unwrap()).unwrap();
        assert!(best > 0 && best < fractions.len() - 1, "{fractions:?}");
    }
}
