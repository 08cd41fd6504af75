//! Attention-guided scale selection.
//!
//! An attention map is normalized into a distribution over patch cells and
//! scored by its Shannon entropy; the scale whose map is most peaked wins.
//! Maps are computed offline for every image and scale and stored on the
//! scale-1 patch grid, so a crop can be scored at any scale without touching
//! the encoder again.

use alloc::vec::Vec;

use crate::encoder::{self, EncoderConfig, EncoderError};
use crate::math;
use crate::raster::{CropRect, Interp, Raster, RasterError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AtgcError {
    #[error("attention entry {index} is negative ({value})")]
    NegativeEntry { index: usize, value: f64 },
    #[error("distribution sums to {0}, not 1")]
    NotNormalized(f64),
    #[error("attention map is empty")]
    EmptyMap,
    #[error("no cache entry for image {image} at scale index {scale}")]
    MissingEntry { image: usize, scale: usize },
    #[error("crop {crop:?} covers {cells} patch cells; at least 4 are required")]
    TooFewCells { crop: CropRect, cells: usize },
    #[error("invalid scale set: {0}")]
    ScaleSet(&'static str),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Strictly increasing list of positive scale factors.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "Vec<f64>", into = "Vec<f64>"))]
pub struct ScaleSet {
    scales: Vec<f64>,
}

/// The thirteen scales of the reference experiments.
pub const DEFAULT_SCALES: [f64; 13] = [0.25, 0.28, 0.34, 0.38, 0.44, 0.47, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0];

impl Default for ScaleSet {
    fn default() -> Self {
        ScaleSet { scales: DEFAULT_SCALES.to_vec() }
    }
}

impl TryFrom<Vec<f64>> for ScaleSet {
    type Error = AtgcError;
    fn try_from(v: Vec<f64>) -> Result<Self, AtgcError> {
        ScaleSet::new(v)
    }
}

impl From<ScaleSet> for Vec<f64> {
    fn from(s: ScaleSet) -> Vec<f64> {
        s.scales
    }
}

impl ScaleSet {
    /// A scale set that must include 1.0.
    pub fn new(scales: Vec<f64>) -> Result<Self, AtgcError> {
        let set = ScaleSet::without_unit(scales)?;
        if !set.scales.contains(&1.0) {
            return Err(AtgcError::ScaleSet("scale 1.0 is missing"));
        }
        Ok(set)
    }

    /// A scale set that may omit 1.0.
    pub fn without_unit(scales: Vec<f64>) -> Result<Self, AtgcError> {
        if scales.is_empty() {
            return Err(AtgcError::ScaleSet("no scales"));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(AtgcError::ScaleSet("scales must be positive and finite"));
        }
        if scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AtgcError::ScaleSet("scales must be strictly increasing"));
        }
        Ok(ScaleSet { scales })
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.scales[0]
    }

    pub fn max(&self) -> f64 {
        self.scales[self.scales.len() - 1]
    }

    pub fn index_of(&self, s: f64) -> Option<usize> {
        self.scales.iter().position(|&x| x == s)
    }

    /// Index of the scale closest to `s` in log space.
    pub fn nearest_index(&self, s: f64) -> usize {
        let target = math::log2(s);
        (0..self.scales.len())
            .min_by(|&a, &b| {
                let da = (math::log2(self.scales[a]) - target).abs();
                let db = (math::log2(self.scales[b]) - target).abs();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap()
    }

    pub fn digest(&self) -> u64 {
        let mut h = math::Hasher64::new();
        for s in &self.scales {
            h.write_u64(s.to_bits());
        }
        h.finish()
    }
}

/// Scale a decision landed on, with the score of every candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleDecision {
    pub scale: f64,
    pub index: usize,
    /// `(scale, score)` per candidate, in scale-set order. Entropies for the
    /// entropy rule, spatial means for the average rule.
    pub scores: Vec<(f64, f64)>,
}

/// Turn non-negative attention into a distribution. An all-zero map has no
/// preferred location and becomes uniform.
pub fn normalize(a: &[f64]) -> Result<Vec<f64>, AtgcError> {
    if a.is_empty() {
        return Err(AtgcError::EmptyMap);
    }
    if let Some((index, &value)) = a.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(AtgcError::NegativeEntry { index, value });
    }
    let sum: f64 = a.iter().sum();
    if sum == 0.0 {
        let u = 1.0 / a.len() as f64;
        return Ok(alloc::vec![u; a.len()]);
    }
    Ok(a.iter().map(|v| v / sum).collect())
}

/// Shannon entropy in nats, with 0 log 0 = 0.
pub fn entropy(p: &[f64]) -> Result<f64, AtgcError> {
    if p.is_empty() {
        return Err(AtgcError::EmptyMap);
    }
    if let Some((index, &value)) = p.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(AtgcError::NegativeEntry { index, value });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(AtgcError::NotNormalized(sum));
    }
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * math::ln(v)).sum();
    Ok(h.max(0.0))
}

/// Spatial mean of a map; the score of the "Average" baseline (higher wins).
pub fn score_average(a: &[f64]) -> Result<f64, AtgcError> {
    if a.is_empty() {
        return Err(AtgcError::EmptyMap);
    }
    if let Some((index, &value)) = a.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(AtgcError::NegativeEntry { index, value });
    }
    Ok(a.iter().sum::<f64>() / a.len() as f64)
}

/// Pick the best `(scale, score)`; exact ties go to the scale closest to 1,
/// then to the smaller scale.
pub fn pick(scores: &[(f64, f64)], lower_is_better: bool) -> usize {
    let better = |a: (f64, f64), b: (f64, f64)| -> bool {
        if a.1 != b.1 {
            return if lower_is_better { a.1 < b.1 } else { a.1 > b.1 };
        }
        let (da, db) = ((a.0 - 1.0).abs(), (b.0 - 1.0).abs());
        if da != db {
            return da < db;
        }
        a.0 < b.0
    };
    let mut best = 0;
    for i in 1..scores.len() {
        if better(scores[i], scores[best]) {
            best = i;
        }
    }
    best
}

/// Entropy rule over already extracted per-scale cell values.
pub fn decide_entropy(scales: &ScaleSet, maps: &[Vec<f64>]) -> Result<ScaleDecision, AtgcError> {
    let mut scores = Vec::with_capacity(maps.len());
    for (&s, m) in scales.scales().iter().zip(maps) {
        scores.push((s, entropy(&normalize(m)?)?));
    }
    let index = pick(&scores, true);
    Ok(ScaleDecision { scale: scores[index].0, index, scores })
}

/// Average rule over already extracted per-scale cell values.
pub fn decide_average(scales: &ScaleSet, maps: &[Vec<f64>]) -> Result<ScaleDecision, AtgcError> {
    let mut scores = Vec::with_capacity(maps.len());
    for (&s, m) in scales.scales().iter().zip(maps) {
        scores.push((s, score_average(m)?));
    }
    let index = pick(&scores, false);
    Ok(ScaleDecision { scale: scores[index].0, index, scores })
}

/// Range of patch cells along one axis that a pixel span `[start, start+len)`
/// overlaps by at least half of the cell's extent.
pub fn cell_span(start: usize, len: usize, extent: usize, patch: usize) -> core::ops::Range<usize> {
    let end = start + len;
    let cells = extent.div_ceil(patch);
    let mut lo = usize::MAX;
    let mut hi = 0;
    for u in start / patch..cells.min(end.div_ceil(patch)) {
        let c0 = u * patch;
        let c1 = ((u + 1) * patch).min(extent);
        let overlap = end.min(c1).saturating_sub(start.max(c0));
        if 2 * overlap >= c1 - c0 {
            lo = lo.min(u);
            hi = hi.max(u + 1);
        }
    }
    if lo == usize::MAX {
        0..0
    } else {
        lo..hi
    }
}

/// Per-image, per-scale attention maps on the scale-1 patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCache {
    pub encoder: EncoderConfig,
    pub scales: ScaleSet,
    pub image_w: usize,
    pub image_h: usize,
    pub dataset_digest: u64,
    maps: Vec<Option<Raster>>,
}

impl AttentionCache {
    pub fn empty(
        encoder: EncoderConfig,
        scales: ScaleSet,
        image_w: usize,
        image_h: usize,
        n_images: usize,
        dataset_digest: u64,
    ) -> Self {
        let maps = alloc::vec![None; n_images * scales.len()];
        AttentionCache { encoder, scales, image_w, image_h, dataset_digest, maps }
    }

    pub fn n_images(&self) -> usize {
        self.maps.len() / self.scales.len()
    }

    /// Number of populated entries.
    pub fn len(&self) -> usize {
        self.maps.iter().filter(|m| m.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        self.encoder.grid_dims(self.image_w, self.image_h)
    }

    pub fn insert(&mut self, image: usize, scale: usize, map: Raster) {
        let (gw, gh) = self.grid_dims();
        assert_eq!((map.width(), map.height(), map.channels()), (gw, gh, 1), "map is not on the scale-1 grid");
        let k = self.scales.len();
        self.maps[image * k + scale] = Some(map);
    }

    pub fn get(&self, image: usize, scale: usize) -> Result<&Raster, AtgcError> {
        let k = self.scales.len();
        if scale >= k || image >= self.n_images() {
            return Err(AtgcError::MissingEntry { image, scale });
        }
        self.maps[image * k + scale].as_ref().ok_or(AtgcError::MissingEntry { image, scale })
    }

    /// Cells of every scale's map under a pixel crop.
    pub fn crop_cells(&self, image: usize, crop: CropRect) -> Result<Vec<Vec<f64>>, AtgcError> {
        crop.check_within(self.image_w, self.image_h)?;
        let p = self.encoder.patch_size;
        let xs = cell_span(crop.x, crop.w, self.image_w, p);
        let ys = cell_span(crop.y, crop.h, self.image_h, p);
        let cells = xs.len() * ys.len();
        if cells < 4 {
            return Err(AtgcError::TooFewCells { crop, cells });
        }
        let mut out = Vec::with_capacity(self.scales.len());
        for j in 0..self.scales.len() {
            let m = self.get(image, j)?;
            let mut v = Vec::with_capacity(cells);
            for gy in ys.clone() {
                for gx in xs.clone() {
                    v.push(m.get(gx, gy, 0));
                }
            }
            out.push(v);
        }
        Ok(out)
    }

    /// Lowest-entropy scale for a crop of image `image`.
    pub fn select_scale(&self, image: usize, crop: CropRect) -> Result<ScaleDecision, AtgcError> {
        decide_entropy(&self.scales, &self.crop_cells(image, crop)?)
    }

    /// Highest-mean-attention scale for a crop (the "Average" baseline).
    pub fn select_average(&self, image: usize, crop: CropRect) -> Result<ScaleDecision, AtgcError> {
        decide_average(&self.scales, &self.crop_cells(image, crop)?)
    }
}

/// One cache entry: attend to the rescaled image, then bring the map back to
/// the scale-1 patch grid.
pub fn cache_entry(img: &Raster, s: f64, cfg: &EncoderConfig) -> Result<Raster, AtgcError> {
    let (gw, gh) = cfg.grid_dims(img.width(), img.height());
    if img.channels() != 3 {
        return Err(EncoderError::Channels(img.channels()).into());
    }
    let gray = img.mean_channels();
    let map = if s == 1.0 {
        encoder::attend_gray(&gray, cfg)?
    } else {
        encoder::attend_gray(&gray.resize(s, Interp::Bilinear)?, cfg)?
    };
    Ok(map.resize_to(gw, gh, Interp::Bilinear))
}

/// Fill a cache from images in index order.
pub fn build_cache<'a, I>(
    images: I,
    encoder: &EncoderConfig,
    scales: &ScaleSet,
    dataset_digest: u64,
) -> Result<AttentionCache, AtgcError>
where
    I: IntoIterator<Item = &'a Raster>,
{
    let images: Vec<&Raster> = images.into_iter().collect();
    let first = images.first().ok_or(AtgcError::EmptyMap)?;
    let mut cache =
        AttentionCache::empty(encoder.clone(), scales.clone(), first.width(), first.height(), images.len(), dataset_digest);
    for (i, img) in images.iter().enumerate() {
        for (j, &s) in scales.scales().iter().enumerate() {
            cache.insert(i, j, cache_entry(img, s, encoder)?);
        }
    }
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&[2.0, 2.0, 2.0, 2.0]).unwrap(), [0.25; 4]);
        assert_eq!(normalize(&[0.0; 4]).unwrap(), [0.25; 4]);
        assert_eq!(normalize(&[1.0, 3.0]).unwrap(), [0.25, 0.75]);
        assert!(matches!(normalize(&[1.0, -0.5]), Err(AtgcError::NegativeEntry { index: 1, .. })));
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(entropy(&[0.5, 0.6]), Err(AtgcError::NotNormalized(_))));
    }

    #[test]
    fn average_examples() {
        assert_eq!(score_average(&[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(score_average(&[0.0; 5]).unwrap(), 0.0);
        assert!(score_average(&[]).is_err());
    }

    #[test]
    fn pick_argmin_and_ties() {
        assert_eq!(pick(&[(0.5, 2.1), (1.0, 1.7), (2.0, 1.9)], true), 1);
        let tied: Vec<(f64, f64)> = DEFAULT_SCALES.iter().map(|&s| (s, 0.3)).collect();
        assert_eq!(DEFAULT_SCALES[pick(&tied, true)], 1.0);
        // 0.75 and 1.25 are equally far from 1: the smaller one wins.
        assert_eq!(pick(&[(0.75, 1.0), (1.25, 1.0), (2.0, 1.0)], true), 0);
        assert_eq!(pick(&[(0.5, 1.0), (1.0, 3.0)], false), 1);
    }

    #[test]
    fn scale_set_validation() {
        assert_eq!(ScaleSet::default().len(), 13);
        assert!(ScaleSet::new(vec![0.5, 2.0]).is_err());
        assert!(ScaleSet::without_unit(vec![0.5, 2.0]).is_ok());
        assert!(ScaleSet::new(vec![1.0, 0.5]).is_err());
        assert!(ScaleSet::new(vec![0.0, 1.0]).is_err());
        let s = ScaleSet::default();
        assert_eq!(s.nearest_index(0.26), 0);
        assert_eq!(s.nearest_index(1.8), 11);
    }

    #[test]
    fn cell_span_half_overlap() {
        assert_eq!(cell_span(0, 128, 256, 8), 0..16);
        assert_eq!(cell_span(4, 8, 256, 8), 0..2);
        assert_eq!(cell_span(5, 8, 256, 8), 1..2);
        assert_eq!(cell_span(3, 2, 256, 8), 0..0);
        // A ragged last cell of 4 pixels counts with 2 covered.
        assert_eq!(cell_span(30, 4, 36, 8), 4..5);
    }

    #[test]
    fn decision_invariant_to_positive_scaling() {
        let mut rng = crate::Prng::new(2);
        let scales = ScaleSet::default();
        let maps: Vec<Vec<f64>> = (0..13).map(|_| (0..64).map(|_| rng.next_f64()).collect()).collect();
        let a = decide_entropy(&scales, &maps).unwrap();
        let scaled: Vec<Vec<f64>> = maps.iter().map(|m| m.iter().map(|v| v * 37.5).collect()).collect();
        let b = decide_entropy(&scales, &scaled).unwrap();
        assert_eq!(a.scale, b.scale);
        for (x, y) in a.scores.iter().zip(&b.scores) {
            assert!((x.1 - y.1).abs() < 1e-12);
        }
    }

    #[test]
    fn build_cache_counts_and_identity_scale() {
        let cfg = EncoderConfig::default();
        let mut rng = crate::Prng::new(8);
        let imgs: Vec<Raster> = (0..2)
            .map(|_| Raster::new(48, 40, 3, (0..48 * 40 * 3).map(|_| rng.next_f64()).collect()).unwrap())
            .collect();
        let cache = build_cache(&imgs, &cfg, &ScaleSet::default(), 0).unwrap();
        assert_eq!(cache.len(), 26);
        let unit = ScaleSet::default().index_of(1.0).unwrap();
        assert_eq!(cache.get(1, unit).unwrap(), &encoder::attend(&imgs[1], &cfg).unwrap());
        assert!(matches!(cache.get(2, 0), Err(AtgcError::MissingEntry { .. })));
        assert!(matches!(
            cache.select_scale(0, CropRect::new(0, 0, 8, 8)),
            Err(AtgcError::TooFewCells { cells: 1, .. })
        ));
    }
}
