//! The self-training loop: crop, pick a scale, ask the API, bring the answer
//! back to crop resolution, gate it on agreement with the student, update.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::atgc::{self, AtgcError, AttentionCache, ScaleSet};
use crate::blackbox::{ApiError, SegmentationApi, Vocabulary};
use crate::math;
use crate::metrics::{self, ConfusionMatrix, MetricsError};
use crate::prng::Prng;
use crate::raster::{ClassMap, CropRect, Interp, Label, Raster, IGNORE};
use crate::scenegen::{SceneStore, Split};
use crate::student::{self, features, Gradients, LinearDecoder, OptimizerState, StudentError, FEATURES};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("strategy {0} needs an attention cache")]
    MissingCache(Strategy),
    #[error(transparent)]
    Api(#[from] ApiError),
    #[error(transparent)]
    Atgc(#[from] AtgcError),
    #[error(transparent)]
    Student(#[from] StudentError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// How the scale of each API query is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    /// Lowest attention entropy.
    Atgc,
    /// Always scale 1.
    Naive,
    /// Uniform over the scale set.
    Random,
    /// Highest mean attention.
    Average,
    /// Query every scale, keep the answer closest to the truth.
    Oracle,
    /// Train on the truth; no API.
    Supervised,
    Fixed(f64),
}

impl Strategy {
    pub const ALL_BASELINES: [Strategy; 6] =
        [Strategy::Supervised, Strategy::Oracle, Strategy::Atgc, Strategy::Naive, Strategy::Random, Strategy::Average];

    /// Strategies that look at the truth; never part of a black-box result.
    pub fn consumes_truth(&self) -> bool {
        matches!(self, Strategy::Oracle | Strategy::Supervised)
    }

    pub fn needs_cache(&self) -> bool {
        matches!(self, Strategy::Atgc | Strategy::Average)
    }

    pub fn uses_api(&self) -> bool {
        !matches!(self, Strategy::Supervised)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Atgc => f.write_str("atgc"),
            Strategy::Naive => f.write_str("naive"),
            Strategy::Random => f.write_str("random"),
            Strategy::Average => f.write_str("average"),
            Strategy::Oracle => f.write_str("oracle"),
            Strategy::Supervised => f.write_str("supervised"),
            Strategy::Fixed(s) => write!(f, "fixed:{s}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let lower = s.to_ascii_lowercase();
        Ok(match lower.as_str() {
            "atgc" => Strategy::Atgc,
            "naive" => Strategy::Naive,
            "random" => Strategy::Random,
            "average" => Strategy::Average,
            "oracle" => Strategy::Oracle,
            "supervised" => Strategy::Supervised,
            "fixed" => return Err("fixed needs a scale, e.g. fixed:0.5".into()),
            other => match other.strip_prefix("fixed:") {
                Some(v) => Strategy::Fixed(v.parse().map_err(|_| format!("bad fixed scale {v:?}"))?),
                None => return Err(format!("unknown strategy {s:?}")),
            },
        })
    }
}

#[cfg(feature = "serde")]
impl serde::Serialize for Strategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[cfg(feature = "serde")]
impl<'de> serde::Deserialize<'de> for Strategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Student/teacher agreement measure used by the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum AgreementMetric {
    #[default]
    PixelAccuracy,
    MeanIou,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub tau: f64,
    pub metric: AgreementMetric,
    pub seed: u64,
    pub strategy: Strategy,
    /// Fraction of iterations, at the start, during which the gate is open.
    pub warmup_frac: f64,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Weight of the soft-target term; hard-label distillation uses 0.
    pub alpha: f64,
    /// Fraction of crops whose pseudo-label is replaced by random labels,
    /// for failure-case studies.
    pub inject_random_pl: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 4,
            crop_size: 128,
            tau: 0.7,
            metric: AgreementMetric::PixelAccuracy,
            seed: 0,
            strategy: Strategy::Atgc,
            warmup_frac: 0.05,
            base_lr: 0.05,
            weight_decay: 0.05,
            alpha: 0.0,
            inject_random_pl: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, scales: &ScaleSet, image_w: usize, image_h: usize) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.crop_size == 0 || self.crop_size > image_w || self.crop_size > image_h {
            return bad("crop_size must fit inside the images");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.inject_random_pl) {
            return bad("warmup_frac and inject_random_pl must lie in [0, 1]");
        }
        if self.alpha != 0.0 {
            return bad("the API returns hard labels only; alpha must be 0");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || self.weight_decay < 0.0 {
            return bad("base_lr must be positive and weight_decay non-negative");
        }
        let candidates: Vec<f64> = match self.strategy {
            Strategy::Fixed(s) => vec![s],
            Strategy::Supervised => vec![],
            Strategy::Naive => vec![1.0],
            _ => scales.scales().to_vec(),
        };
        for s in candidates {
            if !(s > 0.0 && s.is_finite()) || crate::raster::scaled_len(self.crop_size, s) == 0 {
                return bad("every scale must give a non-empty crop");
            }
        }
        Ok(())
    }

    /// Number of leading iterations with the gate bypassed.
    pub fn warmup_iters(&self) -> u64 {
        math::ceil(self.warmup_frac * self.iterations as f64) as u64
    }

    pub fn digest(&self) -> u64 {
        let mut h = math::Hasher64::new();
        h.write_u64(self.iterations);
        h.write_u64(self.batch_size as u64);
        h.write_u64(self.crop_size as u64);
        h.write_u64(self.tau.to_bits());
        h.write_u64(self.metric as u64);
        h.write_u64(self.seed);
        h.write_bytes(format!("{}", self.strategy).as_bytes());
        h.write_u64(self.warmup_frac.to_bits());
        h.write_u64(self.base_lr.to_bits());
        h.write_u64(self.weight_decay.to_bits());
        h.write_u64(self.alpha.to_bits());
        h.write_u64(self.inject_random_pl.to_bits());
        h.finish()
    }
}

/// Agreement between a pseudo-label and a prediction over the pseudo-label's
/// non-IGNORE pixels.
pub fn agreement(pl: &ClassMap, pred: &ClassMap, metric: AgreementMetric) -> Result<f64, MetricsError> {
    match metric {
        AgreementMetric::PixelAccuracy => metrics::pixel_accuracy(pl, pred),
        AgreementMetric::MeanIou => {
            let k = pl
                .labels()
                .iter()
                .chain(pred.labels())
                .filter(|&&l| l != IGNORE)
                .map(|&l| l as usize + 1)
                .max()
                .unwrap_or(0);
            let mut cm = ConfusionMatrix::new(k.max(1));
            cm.add(pl, pred)?;
            if cm.total() == 0 {
                return Err(MetricsError::NothingScored);
            }
            cm.miou()
        }
    }
}

/// One row of the training log, one per crop.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub crop_idx: u64,
    pub strategy: Strategy,
    pub scale: f64,
    pub agreement: f64,
    pub passed: bool,
    /// Training loss of the crop; only computed when it passed the gate.
    pub loss: Option<f64>,
    pub api_calls_cum: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Iterations whose batch was entirely filtered out.
    pub skipped_steps: u64,
}

impl TrainLog {
    pub fn pass_rate(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.passed).count() as f64 / self.rows.len() as f64
    }

    pub const CSV_HEADER: &'static str = "iter,crop_idx,strategy,scale,agreement,passed,loss,api_calls_cum";

    /// CSV text with a header; floats use Rust's shortest round-trip format.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.rows.len() + 1));
        s.push_str(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.iter,
                r.crop_idx,
                r.strategy,
                r.scale,
                r.agreement,
                r.passed as u8,
                r.loss.map(|l| format!("{l}")).unwrap_or_default(),
                r.api_calls_cum
            ));
        }
        s
    }
}

/// Decoder and log produced by a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub decoder: LinearDecoder,
    pub log: TrainLog,
    pub iterations_done: u64,
}

const CROP_STREAM: u64 = 0x4352_4f50;
const SCALE_STREAM: u64 = 0x5343_414c;
const INJECT_STREAM: u64 = 0x494e_4a45;

/// Rescale a crop, query the API, and bring the answer back to crop size.
pub fn query_at_scale<A: SegmentationApi + ?Sized>(
    api: &A,
    crop: &Raster,
    s: f64,
    vocabulary: &Vocabulary,
) -> Result<ClassMap, TrainError> {
    let (w, h) = (crop.width(), crop.height());
    let mask = if s == 1.0 {
        api.segment(crop, vocabulary, (w, h))?
    } else {
        let scaled = crop.resize(s, Interp::Bilinear).map_err(AtgcError::from)?;
        api.segment(&scaled, vocabulary, (w, h))?
    };
    Ok(mask.resize_to(w, h))
}

/// Run the loop on the training split of `store`.
pub fn train<A: SegmentationApi + ?Sized>(
    cfg: &TrainConfig,
    store: &SceneStore,
    api: Option<&A>,
    cache: Option<&AttentionCache>,
    scales: &ScaleSet,
    vocabulary: &Vocabulary,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate(scales, store.width(), store.height())?;
    if cfg.strategy.needs_cache() && cache.is_none() {
        return Err(TrainError::MissingCache(cfg.strategy));
    }
    let api = match (cfg.strategy.uses_api(), api) {
        (true, None) => return Err(TrainError::Config(format!("strategy {} needs an API", cfg.strategy))),
        (_, a) => a,
    };
    let n_train = store.split_len(Split::Train);
    if n_train == 0 {
        return Err(TrainError::Config("the training split is empty".into()));
    }
    let k = store.num_classes();
    let c = cfg.crop_size;
    let mut decoder = LinearDecoder::zeros(k, FEATURES);
    let mut opt = OptimizerState::new(decoder.num_params(), cfg.base_lr, cfg.weight_decay, cfg.iterations);
    let mut crop_rng = Prng::from_parts(&[cfg.seed, CROP_STREAM]);
    let mut scale_rng = Prng::from_parts(&[cfg.seed, SCALE_STREAM]);
    let mut inject_rng = Prng::from_parts(&[cfg.seed, INJECT_STREAM]);
    let warmup = cfg.warmup_iters();
    let mut log = TrainLog::default();
    let mut crop_idx = 0u64;

    for iter in 0..cfg.iterations {
        let mut acc = Gradients::zeros(k, FEATURES);
        let mut passed_n = 0usize;
        for _ in 0..cfg.batch_size {
            let image = crop_rng.below(n_train as u64) as usize;
            let x = crop_rng.below((store.width() - c + 1) as u64) as usize;
            let y = crop_rng.below((store.height() - c + 1) as u64) as usize;
            let rect = CropRect::new(x, y, c, c);
            let img = store.crop_image(image, rect);
            let truth = store.crop_truth(image, rect);
            let random_scale = scale_rng.below(scales.len() as u64) as usize;
            let inject = inject_rng.next_f64() < cfg.inject_random_pl;

            let (scale, mut pl) = match cfg.strategy {
                Strategy::Supervised => (1.0, truth.clone()),
                Strategy::Oracle => {
                    let api = api.expect("checked above");
                    let mut best: Option<(f64, f64, ClassMap)> = None;
                    for &s in scales.scales() {
                        let pl = query_at_scale(api, &img, s, vocabulary)?;
                        let acc = metrics::pixel_accuracy(&truth, &pl).unwrap_or(0.0);
                        let better = match &best {
                            None => true,
                            Some((bs, ba, _)) => atgc::pick(&[(*bs, *ba), (s, acc)], false) == 1,
                        };
                        if better {
                            best = Some((s, acc, pl));
                        }
                    }
                    let (s, _, pl) = best.expect("non-empty scale set");
                    (s, pl)
                }
                other => {
                    let s = match other {
                        Strategy::Atgc => cache.expect("checked above").select_scale(image, rect)?.scale,
                        Strategy::Average => cache.expect("checked above").select_average(image, rect)?.scale,
                        Strategy::Naive => 1.0,
                        Strategy::Random => scales.scales()[random_scale],
                        Strategy::Fixed(s) => s,
                        Strategy::Oracle | Strategy::Supervised => unreachable!(),
                    };
                    (s, query_at_scale(api.expect("checked above"), &img, s, vocabulary)?)
                }
            };
            if inject && cfg.strategy.uses_api() {
                let mut r = Prng::from_parts(&[cfg.seed, INJECT_STREAM, crop_idx]);
                for l in pl.labels_mut() {
                    *l = r.below(k as u64) as Label;
                }
            }

            let feats = features(&img);
            let pred = decoder.predict(&feats)?;
            let agreement = agreement(&pl, &pred, cfg.metric).unwrap_or(0.0);
            let gate_open = cfg.strategy == Strategy::Supervised || iter < warmup;
            let mut loss = None;
            let mut passed = false;
            if gate_open || agreement >= cfg.tau {
                match student::loss_ce(&decoder, &feats, &pl) {
                    Ok((l, g)) => {
                        acc.add_scaled(&g, 1.0);
                        passed_n += 1;
                        passed = true;
                        loss = Some(l);
                    }
                    Err(StudentError::AllIgnored) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            log.rows.push(LogRow {
                iter,
                crop_idx,
                strategy: cfg.strategy,
                scale,
                agreement,
                passed,
                loss,
                api_calls_cum: api.map_or(0, |a| a.calls_used()),
            });
            crop_idx += 1;
        }
        if passed_n == 0 {
            log.skipped_steps += 1;
            continue;
        }
        acc.scale(1.0 / passed_n as f64);
        student::step(&mut decoder, &acc, &mut opt, iter)?;
        if !decoder.is_finite() {
            return Err(TrainError::Student(StudentError::NonFinite { index: 0, value: f64::NAN }));
        }
    }
    Ok(TrainOutcome { decoder, log, iterations_done: cfg.iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::{BlackBox, FidelityModel};
    use crate::scenegen::DatasetConfig;

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL_BASELINES.iter().copied().chain([Strategy::Fixed(0.75)]) {
            assert_eq!(format!("{s}").parse::<Strategy>().unwrap(), s);
        }
        assert!("fixed".parse::<Strategy>().is_err());
        assert!("bogus".parse::<Strategy>().is_err());
        assert!(Strategy::Oracle.consumes_truth() && Strategy::Supervised.consumes_truth());
        assert!(!Strategy::Atgc.consumes_truth());
    }

    #[test]
    fn agreement_examples() {
        let pl = ClassMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        let pred = ClassMap::new(2, 2, vec![0, 1, 1, 1]).unwrap();
        assert_eq!(agreement(&pl, &pred, AgreementMetric::PixelAccuracy).unwrap(), 0.75);
        assert!((agreement(&pl, &pred, AgreementMetric::MeanIou).unwrap() - 7.0 / 12.0).abs() < 1e-15);
        for m in [AgreementMetric::PixelAccuracy, AgreementMetric::MeanIou] {
            assert_eq!(agreement(&pl, &pl, m).unwrap(), 1.0);
            let a = ClassMap::filled(3, 3, 0);
            let b = ClassMap::filled(3, 3, 1);
            assert_eq!(agreement(&a, &b, m).unwrap(), 0.0);
            assert!(agreement(&ClassMap::filled(2, 2, IGNORE), &b.crop(CropRect::new(0, 0, 2, 2)).unwrap(), m).is_err());
        }
    }

    fn tiny_world() -> (DatasetConfig, SceneStore) {
        let cfg = DatasetConfig { n_train: 3, n_val: 1, image_w: 96, image_h: 96, ..DatasetConfig::default() };
        let mut cfg = cfg;
        for p in &mut cfg.profiles {
            p.size_range = (p.size_range.0.min(24), p.size_range.1.min(32));
        }
        let store = SceneStore::generate(&cfg).unwrap();
        (cfg, store)
    }

    #[test]
    fn zero_iterations_leave_initialization() {
        let (_, store) = tiny_world();
        let cfg = TrainConfig { iterations: 0, crop_size: 64, strategy: Strategy::Supervised, ..TrainConfig::default() };
        let out = train::<BlackBox>(&cfg, &store, None, None, &ScaleSet::default(), &Vocabulary::default()).unwrap();
        assert_eq!(out.decoder, LinearDecoder::zeros(8, FEATURES));
        assert!(out.log.rows.is_empty());
    }

    #[test]
    fn oracle_spends_one_call_per_scale() {
        let (world, store) = tiny_world();
        let api = BlackBox::new(&world.profiles, world.appearance.chroma_radius, FidelityModel::default(), 0, None);
        let voc = api.vocabulary().clone();
        let scales = ScaleSet::new(vec![0.5, 1.0, 1.5]).unwrap();
        let cfg = TrainConfig { iterations: 2, batch_size: 2, crop_size: 64, strategy: Strategy::Oracle, ..TrainConfig::default() };
        let out = train(&cfg, &store, Some(&api), None, &scales, &voc).unwrap();
        let calls: Vec<u64> = out.log.rows.iter().map(|r| r.api_calls_cum).collect();
        assert_eq!(calls, [3, 6, 9, 12]);

        let cfg = TrainConfig { strategy: Strategy::Naive, tau: 0.0, ..cfg };
        let api = BlackBox::new(&world.profiles, world.appearance.chroma_radius, FidelityModel::default(), 0, None);
        let out = train(&cfg, &store, Some(&api), None, &scales, &voc).unwrap();
        assert_eq!(out.log.rows.last().unwrap().api_calls_cum, 4);
        assert_eq!(out.log.pass_rate(), 1.0);
    }

    #[test]
    fn cache_strategies_require_a_cache() {
        let (world, store) = tiny_world();
        let api = BlackBox::new(&world.profiles, 0.12, FidelityModel::default(), 0, None);
        let cfg = TrainConfig { iterations: 1, crop_size: 64, ..TrainConfig::default() };
        let err = train(&cfg, &store, Some(&api), None, &ScaleSet::default(), api.vocabulary()).unwrap_err();
        assert_eq!(err, TrainError::MissingCache(Strategy::Atgc));
    }

    #[test]
    fn rejects_bad_configs() {
        let s = ScaleSet::default();
        assert!(TrainConfig { tau: 1.5, ..TrainConfig::default() }.validate(&s, 256, 256).is_err());
        assert!(TrainConfig { crop_size: 300, ..TrainConfig::default() }.validate(&s, 256, 256).is_err());
        assert!(TrainConfig { alpha: 0.5, ..TrainConfig::default() }.validate(&s, 256, 256).is_err());
        assert!(TrainConfig::default().validate(&s, 256, 256).is_ok());
        assert_eq!(TrainConfig::default().warmup_iters(), 100);
    }
}
