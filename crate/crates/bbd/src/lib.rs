//! Std side of the black-box distillation lab: BRF1 files, datasets and
//! attention caches on disk, checkpoints, the run configuration, CSV reports,
//! and the simulated segmentation API served over HTTP.

pub mod brf;
pub mod cache_io;
pub mod checkpoint;
pub mod client;
pub mod config;
pub mod dataset;
pub mod error;
mod hashing;
pub mod http;
pub mod pipeline;
pub mod reports;
pub mod wire;

pub use bbd_core as core;
pub use error::{Error, Result};
