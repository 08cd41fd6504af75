//! The simulated open-vocabulary segmentation API.
//!
//! The service answers with hard labels only. Internally it reads the true
//! class of every pixel off the image colour (each class has its own hue),
//! then degrades that answer with a per-class accuracy that depends on the
//! scale the image was presented at, plus label flips along class
//! boundaries. Callers see a [`ClassMap`] in the label space of the
//! vocabulary they sent.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::math;
use crate::prng::{mix64, Prng};
use crate::raster::{ClassMap, Label, Raster, IGNORE};
use crate::scenegen::{chroma_of, ClassProfile, Palette};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ApiError {
    #[error("API call budget exhausted ({used} of {max} calls used)")]
    Quota { used: u64, max: u64 },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed request or response: {0}")]
    Malformed(String),
    #[error("image is {image_w}x{image_h} but truth is {truth_w}x{truth_h}")]
    DimensionMismatch { image_w: usize, image_h: usize, truth_w: usize, truth_h: usize },
}

/// One vocabulary entry: a canonical class name and its aliases.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VocabEntry {
    pub name: String,
    #[cfg_attr(feature = "serde", serde(default))]
    pub synonyms: Vec<String>,
}

impl VocabEntry {
    pub fn new(name: &str, synonyms: &[&str]) -> Self {
        VocabEntry { name: name.into(), synonyms: synonyms.iter().map(|s| (*s).into()).collect() }
    }

    fn aliases(&self) -> impl Iterator<Item = &str> {
        core::iter::once(self.name.as_str()).chain(self.synonyms.iter().map(String::as_str))
    }
}

/// Ordered class names; the position of an entry is its label.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct Vocabulary {
    pub entries: Vec<VocabEntry>,
}

impl Vocabulary {
    pub fn new(entries: Vec<VocabEntry>) -> Self {
        Vocabulary { entries }
    }

    pub fn from_profiles(profiles: &[ClassProfile]) -> Self {
        Vocabulary {
            entries: profiles
                .iter()
                .map(|p| VocabEntry { name: p.name.clone(), synonyms: p.synonyms.clone() })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn digest(&self) -> u64 {
        let mut h = math::Hasher64::new();
        h.write_u64(self.entries.len() as u64);
        for e in &self.entries {
            h.write_bytes(e.name.as_bytes());
            h.write_u64(e.synonyms.len() as u64);
            for s in &e.synonyms {
                h.write_bytes(s.as_bytes());
            }
        }
        h.finish()
    }

    /// For each query entry, the internal entry it names, if any. Two entries
    /// match when any alias of one equals any alias of the other, ignoring
    /// ASCII case.
    pub fn resolve(query: &Vocabulary, internal: &Vocabulary) -> Vec<Option<usize>> {
        query
            .entries
            .iter()
            .map(|q| {
                internal
                    .entries
                    .iter()
                    .position(|i| q.aliases().any(|a| i.aliases().any(|b| a.eq_ignore_ascii_case(b))))
            })
            .collect()
    }
}

/// Scale-dependent accuracy of the simulated API.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct FidelityModel {
    pub q_max: f64,
    pub q_min: f64,
    /// Width of the accuracy peak, in octaves.
    pub bandwidth: f64,
    /// Probability of flipping a pixel near a class boundary.
    pub boundary_flip: f64,
    /// Distance from a boundary, in pixels of the queried image, within
    /// which flips happen.
    pub boundary_band: f64,
}

impl Default for FidelityModel {
    fn default() -> Self {
        FidelityModel { q_max: 0.95, q_min: 0.35, bandwidth: 0.8, boundary_flip: 0.3, boundary_band: 2.0 }
    }
}

impl FidelityModel {
    /// The noiseless teacher.
    pub fn perfect() -> Self {
        FidelityModel { q_max: 1.0, q_min: 1.0, boundary_flip: 0.0, ..FidelityModel::default() }
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        if !(self.q_max > 0.0 && self.q_max <= 1.0) {
            return Err("q_max must lie in (0, 1]");
        }
        if !(self.q_min >= 0.0 && self.q_min <= self.q_max) {
            return Err("q_min must lie in [0, q_max]");
        }
        if !(self.bandwidth > 0.0) {
            return Err("bandwidth must be positive");
        }
        if !(0.0..1.0).contains(&self.boundary_flip) {
            return Err("boundary_flip must lie in [0, 1)");
        }
        if !(self.boundary_band >= 0.0) {
            return Err("boundary_band must be non-negative");
        }
        Ok(())
    }

    /// Probability that a pixel of a class with optimal scale `sigma` keeps
    /// its label when the image is seen at scale `s`.
    pub fn keep_probability(&self, sigma: f64, s: f64) -> f64 {
        let octaves = math::log2(s / sigma);
        let bump = math::exp(-(octaves * octaves) / (2.0 * self.bandwidth * self.bandwidth));
        (self.q_min + (self.q_max - self.q_min) * bump).clamp(self.q_min, self.q_max)
    }
}

/// Call accounting shared by every request handler.
#[derive(Debug, Default)]
pub struct ApiBudget {
    max_calls: Option<u64>,
    used: AtomicU64,
    bytes_sent: AtomicU64,
    bytes_received: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BudgetSnapshot {
    pub max_calls: Option<u64>,
    pub used_calls: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl BudgetSnapshot {
    pub fn remaining(&self) -> Option<u64> {
        self.max_calls.map(|m| m - self.used_calls)
    }
}

impl ApiBudget {
    pub fn new(max_calls: Option<u64>) -> Self {
        ApiBudget { max_calls, ..ApiBudget::default() }
    }

    /// Reserve one call; fails without side effects once the budget is spent.
    pub fn acquire(&self) -> Result<u64, ApiError> {
        let max = match self.max_calls {
            None => return Ok(self.used.fetch_add(1, Ordering::SeqCst) + 1),
            Some(m) => m,
        };
        self.used
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |u| if u < max { Some(u + 1) } else { None })
            .map(|prev| prev + 1)
            .map_err(|used| ApiError::Quota { used, max })
    }

    pub fn record_bytes(&self, received: u64, sent: u64) {
        self.bytes_received.fetch_add(received, Ordering::SeqCst);
        self.bytes_sent.fetch_add(sent, Ordering::SeqCst);
    }

    pub fn snapshot(&self) -> BudgetSnapshot {
        BudgetSnapshot {
            max_calls: self.max_calls,
            used_calls: self.used.load(Ordering::SeqCst),
            bytes_sent: self.bytes_sent.load(Ordering::SeqCst),
            bytes_received: self.bytes_received.load(Ordering::SeqCst),
        }
    }
}

/// Anything that turns an image plus a vocabulary into a hard label map.
pub trait SegmentationApi {
    /// `base_crop` is the size of the crop before rescaling; the ratio of the
    /// image width to it is the scale the API sees.
    fn segment(&self, image: &Raster, vocabulary: &Vocabulary, base_crop: (usize, usize)) -> Result<ClassMap, ApiError>;

    /// Calls charged so far.
    fn calls_used(&self) -> u64;
}

/// Read the class of every pixel from its colour: per-pixel nearest class
/// hue, then a majority vote over a `(2r+1)^2` window.
pub fn perceive(image: &Raster, palette: &Palette, radius: usize) -> ClassMap {
    let (w, h) = (image.width(), image.height());
    let k = palette.centers.len();
    let n = w * h;
    let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
    // Grey pixels take the last slot; ties go to the lowest slot.
    let raw: Vec<usize> = (0..n)
        .map(|i| {
            let (u, v) = chroma_of([r[i], g[i], b[i]]);
            match palette.classify(u, v) {
                IGNORE => k,
                l => l as usize,
            }
        })
        .collect();
    let to_label = |slot: usize| if slot == k { IGNORE } else { slot as Label };
    if radius == 0 {
        return ClassMap::new(w, h, raw.into_iter().map(to_label).collect()).expect("shape");
    }
    let mut counts = vec![0u32; k + 1];
    let mut touched: Vec<usize> = Vec::with_capacity((2 * radius + 1) * (2 * radius + 1));
    let mut out = Vec::with_capacity(n);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(w - 1));
            let centre = raw[y * w + x];
            let uniform = (y0..=y1).all(|yy| raw[yy * w + x0..=yy * w + x1].iter().all(|&l| l == centre));
            if uniform {
                out.push(to_label(centre));
                continue;
            }
            for yy in y0..=y1 {
                for &l in &raw[yy * w + x0..=yy * w + x1] {
                    if counts[l] == 0 {
                        touched.push(l);
                    }
                    counts[l] += 1;
                }
            }
            let mut best = k;
            let mut best_n = 0;
            for &l in &touched {
                let c = counts[l];
                if c > best_n || (c == best_n && l < best) {
                    best_n = c;
                    best = l;
                }
                counts[l] = 0;
            }
            touched.clear();
            out.push(to_label(best));
        }
    }
    ClassMap::new(w, h, out).expect("shape")
}

/// Content digest of a raster, used to seed deterministic answers.
pub fn raster_digest(r: &Raster) -> u64 {
    let mut h = math::Hasher64::new();
    h.write_u64(r.width() as u64);
    h.write_u64(r.height() as u64);
    h.write_u64(r.channels() as u64);
    for v in r.values() {
        h.write_u64(v.to_bits());
    }
    h.finish()
}

/// Window radius of the colour vote, in pixels of the queried image.
pub const PERCEPTION_RADIUS: usize = 1;

/// The world's teacher: knows every class profile and degrades its answers
/// according to a [`FidelityModel`].
#[derive(Debug)]
pub struct BlackBox {
    profiles: Vec<ClassProfile>,
    internal: Vocabulary,
    palette: Palette,
    fidelity: FidelityModel,
    seed: u64,
    budget: ApiBudget,
    /// `(dy, dx)` offsets within the boundary band, nearest first.
    band: Vec<(isize, isize)>,
}

impl BlackBox {
    pub fn new(profiles: &[ClassProfile], chroma_radius: f64, fidelity: FidelityModel, seed: u64, max_calls: Option<u64>) -> Self {
        let d = fidelity.boundary_band;
        let r = math::floor(d) as isize;
        let mut band: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .filter(|&(dy, dx)| (dy, dx) != (0, 0) && ((dy * dy + dx * dx) as f64) <= d * d)
            .collect();
        band.sort_by_key(|&(dy, dx)| (dy * dy + dx * dx, dy, dx));
        BlackBox {
            profiles: profiles.to_vec(),
            internal: Vocabulary::from_profiles(profiles),
            palette: Palette::new(profiles, chroma_radius),
            fidelity,
            seed,
            budget: ApiBudget::new(max_calls),
            band,
        }
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.internal
    }

    pub fn fidelity(&self) -> &FidelityModel {
        &self.fidelity
    }

    pub fn budget(&self) -> &ApiBudget {
        &self.budget
    }

    /// Internal class index to query label, for a query vocabulary.
    pub fn label_mapping(&self, query: &Vocabulary) -> Vec<Option<Label>> {
        let resolved = Vocabulary::resolve(query, &self.internal);
        let mut map = vec![None; self.internal.len()];
        for (q, r) in resolved.iter().enumerate() {
            if let Some(i) = *r {
                if map[i].is_none() {
                    map[i] = Some(q as Label);
                }
            }
        }
        map
    }

    /// Degrade a true label map as seen at scale `s`. `mapping` sends internal
    /// classes to output labels; unmapped classes are answered with a random
    /// mapped confusable, or IGNORE when none is mapped.
    pub fn predict(&self, truth: &ClassMap, mapping: &[Option<Label>], s: f64, seed: u64) -> ClassMap {
        let (w, h) = (truth.width(), truth.height());
        let labels = truth.labels();
        let mut rng = Prng::new(seed);
        let keep: Vec<f64> =
            self.profiles.iter().map(|p| self.fidelity.keep_probability(p.optimal_scale, s)).collect();
        let mut out = Vec::with_capacity(w * h);
        for &c in labels {
            if c == IGNORE {
                out.push(IGNORE);
                continue;
            }
            let p = &self.profiles[c as usize];
            let label = if rng.next_f64() < keep[c as usize] || p.confusable_with.is_empty() {
                c
            } else {
                p.confusable_with[rng.below(p.confusable_with.len() as u64) as usize]
            };
            out.push(label);
        }
        if self.fidelity.boundary_flip > 0.0 && !self.band.is_empty() {
            let reach = self.band.iter().map(|&(dy, dx)| dy.unsigned_abs().max(dx.unsigned_abs())).max().unwrap_or(0);
            // Rows whose window around x holds one label only; a pixel whose
            // whole box is uniform cannot be near a boundary.
            let mut flat = vec![false; w * h];
            for y in 0..h {
                let row = &labels[y * w..(y + 1) * w];
                for x in 0..w {
                    let (x0, x1) = (x.saturating_sub(reach), (x + reach).min(w - 1));
                    flat[y * w + x] = row[x0..=x1].iter().all(|&l| l == row[x]);
                }
            }
            for y in 0..h {
                let (y0, y1) = (y.saturating_sub(reach), (y + reach).min(h - 1));
                for x in 0..w {
                    let c = labels[y * w + x];
                    if c == IGNORE {
                        continue;
                    }
                    if (y0..=y1).all(|yy| flat[yy * w + x] && labels[yy * w + x] == c) {
                        continue;
                    }
                    let across = self.band.iter().find_map(|&(dy, dx)| {
                        let (yy, xx) = (y as isize + dy, x as isize + dx);
                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            return None;
                        }
                        let o = labels[yy as usize * w + xx as usize];
                        (o != c && o != IGNORE).then_some(o)
                    });
                    if let Some(o) = across {
                        if rng.next_f64() < self.fidelity.boundary_flip {
                            out[y * w + x] = o;
                        }
                    }
                }
            }
        }
        for l in &mut out {
            if *l == IGNORE {
                continue;
            }
            *l = match mapping[*l as usize] {
                Some(q) => q,
                None => {
                    let options: Vec<Label> = self.profiles[*l as usize]
                        .confusable_with
                        .iter()
                        .filter_map(|&c| mapping[c as usize])
                        .collect();
                    if options.is_empty() {
                        IGNORE
                    } else {
                        options[rng.below(options.len() as u64) as usize]
                    }
                }
            };
        }
        ClassMap::new(w, h, out).expect("shape")
    }

    /// Deterministic answer for an image, without budget accounting.
    pub fn answer(&self, image: &Raster, vocabulary: &Vocabulary, base_crop: (usize, usize)) -> Result<ClassMap, ApiError> {
        if image.channels() != 3 {
            return Err(ApiError::Malformed(alloc::format!("expected 3 channels, got {}", image.channels())));
        }
        if base_crop.0 == 0 || base_crop.1 == 0 {
            return Err(ApiError::Malformed("base_crop must be positive".into()));
        }
        if vocabulary.is_empty() {
            return Err(ApiError::Malformed("empty vocabulary".into()));
        }
        let s = image.width() as f64 / base_crop.0 as f64;
        let truth = perceive(image, &self.palette, PERCEPTION_RADIUS);
        let seed = mix64(self.seed ^ mix64(raster_digest(image) ^ mix64(vocabulary.digest())));
        Ok(self.predict(&truth, &self.label_mapping(vocabulary), s, seed))
    }
}

impl SegmentationApi for BlackBox {
    fn segment(&self, image: &Raster, vocabulary: &Vocabulary, base_crop: (usize, usize)) -> Result<ClassMap, ApiError> {
        self.budget.acquire()?;
        self.answer(image, vocabulary, base_crop)
    }

    fn calls_used(&self) -> u64 {
        self.budget.snapshot().used_calls
    }
}
