//! Black-box distillation laboratory core.
//!
//! Everything in this crate is pure computation over in-memory values: scene
//! synthesis, the band-pass attention encoder, entropy-based scale selection,
//! the simulated one-hot segmentation API, the linear student and its
//! optimizer, the self-training loop and the evaluation metrics. IO, file
//! formats, HTTP and the CLI live in the `bbd` companion crate.
//!
//! The crate is `no_std` and only needs `alloc`. Transcendental functions come
//! from `libm` so results are bit-identical across platforms.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod atgc;
pub mod blackbox;
pub mod encoder;
pub mod metrics;
mod math;
pub mod prng;
pub mod raster;
pub mod scenegen;
pub mod student;
pub mod trainer;

pub use atgc::{AttentionCache, ScaleDecision, ScaleSet};
pub use blackbox::{ApiBudget, ApiError, BlackBox, FidelityModel, SegmentationApi, Vocabulary};
pub use encoder::EncoderConfig;
pub use prng::Prng;
pub use raster::{ClassMap, CropRect, Interp, Label, Raster, IGNORE};
pub use scenegen::{ClassProfile, DatasetConfig, Scene, SceneStore, Split};
pub use student::{FeatureMap, LinearDecoder, OptimizerState};
pub use trainer::{Strategy, TrainConfig, TrainLog};
