//! Segmentation scores and the two diagnostics built on them: the per-class
//! scale sweep of the API and the entropy/quality rank correlation.

use alloc::vec;
use alloc::vec::Vec;

use crate::atgc::{AttentionCache, AtgcError, ScaleSet};
use crate::blackbox::{ApiError, SegmentationApi, Vocabulary};
use crate::prng::Prng;
use crate::raster::{ClassMap, CropRect, Interp, Label, IGNORE};
use crate::scenegen::{SceneStore, Split};
use crate::student::{features, LinearDecoder, StudentError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("no class has a defined IoU")]
    AllUndefined,
    #[error("maps differ in size: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("label {0} outside the {1} classes")]
    LabelOutOfRange(Label, usize),
    #[error("reference map has no scored pixel")]
    NothingScored,
    #[error(transparent)]
    Api(#[from] ApiError),
    #[error(transparent)]
    Atgc(#[from] AtgcError),
    #[error(transparent)]
    Student(#[from] StudentError),
}

/// Rows are truth, columns prediction. Predictions of IGNORE on scored
/// pixels count as misses of the true class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
    missed: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k], missed: vec![0; k] }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn add(&mut self, truth: &ClassMap, pred: &ClassMap) -> Result<(), MetricsError> {
        if truth.width() != pred.width() || truth.height() != pred.height() {
            return Err(MetricsError::ShapeMismatch(truth.width(), truth.height(), pred.width(), pred.height()));
        }
        for (&t, &p) in truth.labels().iter().zip(pred.labels()) {
            if t == IGNORE {
                continue;
            }
            if t as usize >= self.k {
                return Err(MetricsError::LabelOutOfRange(t, self.k));
            }
            if p == IGNORE {
                self.missed[t as usize] += 1;
            } else if p as usize >= self.k {
                return Err(MetricsError::LabelOutOfRange(p, self.k));
            } else {
                self.counts[t as usize * self.k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.missed.iter_mut().zip(&other.missed) {
            *a += b;
        }
    }

    /// Number of scored (non-IGNORE truth) pixels.
    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.missed.iter().sum::<u64>()
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class appears in neither map.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.get(c, c);
        let row: u64 = (0..self.k).map(|p| self.get(c, p)).sum::<u64>() + self.missed[c];
        let col: u64 = (0..self.k).map(|t| self.get(t, c)).sum();
        let union = row + col - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn miou(&self) -> Result<f64, MetricsError> {
        let defined: Vec<f64> = (0..self.k).filter_map(|c| self.iou(c)).collect();
        if defined.is_empty() {
            return Err(MetricsError::AllUndefined);
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }

    /// Fraction of scored pixels predicted correctly.
    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (0..self.k).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64)
    }
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// input is constant or shorter than two.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    if a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / crate::math::sqrt(va * vb))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).expect("finite values"));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = rank;
        }
        i = j + 1;
    }
    out
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Per-class IoU of the raw API answers at every scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub scales: Vec<f64>,
    /// `iou[class][scale]`.
    pub iou: Vec<Vec<Option<f64>>>,
    /// Mean over defined classes, per scale.
    pub mean: Vec<Option<f64>>,
}

impl SweepReport {
    /// Scale index with the highest IoU for a class (first on ties).
    pub fn peak(&self, class: usize) -> Option<usize> {
        let row = &self.iou[class];
        let mut best: Option<usize> = None;
        for (j, v) in row.iter().enumerate() {
            if let Some(v) = v {
                if best.is_none_or(|b| *v > row[b].unwrap()) {
                    best = Some(j);
                }
            }
        }
        best
    }
}

/// Query every validation image at every scale and score the answers
/// against the truth, after bringing them back to full resolution.
pub fn sweep<A: SegmentationApi + ?Sized>(
    store: &SceneStore,
    api: &A,
    scales: &ScaleSet,
    vocabulary: &Vocabulary,
) -> Result<SweepReport, MetricsError> {
    let k = store.num_classes();
    let (w, h) = (store.width(), store.height());
    let mut per_scale = Vec::with_capacity(scales.len());
    for &s in scales.scales() {
        let mut cm = ConfusionMatrix::new(k);
        for i in 0..store.split_len(Split::Val) {
            let idx = store.index(Split::Val, i);
            let img = store.image(idx);
            let scaled = if s == 1.0 { img } else { img.resize(s, Interp::Bilinear).map_err(AtgcError::from)? };
            let mask = api.segment(&scaled, vocabulary, (w, h))?.resize_to(w, h);
            cm.add(&store.truth(idx), &mask)?;
        }
        per_scale.push(cm);
    }
    let iou = (0..k).map(|c| per_scale.iter().map(|cm| cm.iou(c)).collect()).collect();
    let mean = per_scale.iter().map(|cm| cm.miou().ok()).collect();
    Ok(SweepReport { scales: scales.scales().to_vec(), iou, mean })
}

/// Outcome of one crop in the entropy/quality study.
#[derive(Debug, Clone, PartialEq)]
pub struct CropCorrelation {
    pub image: usize,
    pub crop: CropRect,
    pub spearman: Option<f64>,
    pub n_scales: usize,
}

/// For random training crops, rank-correlate negative attention entropy with
/// the pixel accuracy of the API answer, across scales.
pub fn entropy_quality_correlation<A: SegmentationApi + ?Sized>(
    store: &SceneStore,
    cache: &AttentionCache,
    api: &A,
    vocabulary: &Vocabulary,
    crop_size: usize,
    n_crops: usize,
    seed: u64,
) -> Result<Vec<CropCorrelation>, MetricsError> {
    let mut rng = Prng::from_parts(&[seed, 0x434f_5252]);
    let n = store.split_len(Split::Train);
    let mut out = Vec::with_capacity(n_crops);
    for _ in 0..n_crops {
        let image = rng.below(n as u64) as usize;
        let x = rng.below((store.width() - crop_size + 1) as u64) as usize;
        let y = rng.below((store.height() - crop_size + 1) as u64) as usize;
        let crop = CropRect::new(x, y, crop_size, crop_size);
        let decision = cache.select_scale(image, crop)?;
        let img = store.crop_image(image, crop);
        let truth = store.crop_truth(image, crop);
        let mut neg_entropy = Vec::with_capacity(decision.scores.len());
        let mut accuracy = Vec::with_capacity(decision.scores.len());
        for &(s, e) in &decision.scores {
            let scaled = if s == 1.0 { img.clone() } else { img.resize(s, Interp::Bilinear).map_err(AtgcError::from)? };
            let pl = api.segment(&scaled, vocabulary, (crop_size, crop_size))?.resize_to(crop_size, crop_size);
            neg_entropy.push(-e);
            accuracy.push(pixel_accuracy(&truth, &pl)?);
        }
        out.push(CropCorrelation { image, crop, spearman: spearman(&neg_entropy, &accuracy), n_scales: accuracy.len() });
    }
    Ok(out)
}

/// Fraction of non-IGNORE `reference` pixels where `other` agrees.
pub fn pixel_accuracy(reference: &ClassMap, other: &ClassMap) -> Result<f64, MetricsError> {
    if reference.width() != other.width() || reference.height() != other.height() {
        return Err(MetricsError::ShapeMismatch(reference.width(), reference.height(), other.width(), other.height()));
    }
    let mut scored = 0usize;
    let mut hit = 0usize;
    for (&r, &o) in reference.labels().iter().zip(other.labels()) {
        if r != IGNORE {
            scored += 1;
            hit += (r == o) as usize;
        }
    }
    if scored == 0 {
        return Err(MetricsError::NothingScored);
    }
    Ok(hit as f64 / scored as f64)
}

/// Confusion of the student's predictions over a whole split.
pub fn evaluate(decoder: &LinearDecoder, store: &SceneStore, split: Split) -> Result<ConfusionMatrix, MetricsError> {
    let mut cm = ConfusionMatrix::new(store.num_classes());
    for i in 0..store.split_len(split) {
        let idx = store.index(split, i);
        let pred = decoder.predict(&features(&store.image(idx)))?;
        cm.add(&store.truth(idx), &pred)?;
    }
    Ok(cm)
}
