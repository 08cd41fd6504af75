//! Glue between the run configuration and the core: building the API,
//! datasets and caches, and running a training job end to end.

use std::path::Path;
use std::sync::Arc;

use bbd_core::atgc::{self, AttentionCache, ScaleSet};
use bbd_core::blackbox::{BlackBox, SegmentationApi, Vocabulary};
use bbd_core::metrics::{self, ConfusionMatrix};
use bbd_core::scenegen::{SceneStore, Split};
use bbd_core::trainer::{self, TrainConfig, TrainOutcome};

use crate::cache_io;
use crate::client::Client;
use crate::config::RunConfig;
use crate::dataset::{self, Dataset};
use crate::error::{Error, Result};
use crate::hashing::{digest64, sha256_hex};

/// The world's simulated API, straight from the config.
pub fn blackbox(cfg: &RunConfig) -> BlackBox {
    BlackBox::new(&cfg.world.profiles, cfg.world.appearance.chroma_radius, cfg.fidelity.clone(), cfg.api.seed, cfg.api.max_calls)
}

/// Remote when a URL is given (flag first, then config), else in-process.
pub fn client(cfg: &RunConfig, url: Option<&str>) -> Client {
    match url.or(cfg.api.url.as_deref()) {
        Some(u) => Client::remote(u, cfg.api.response_cache),
        None => Client::in_process(Arc::new(blackbox(cfg)), cfg.api.response_cache),
    }
}

/// Read a dataset from disk, or generate the configured one in memory.
pub fn dataset(cfg: &RunConfig, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(dir) => dataset::read_dataset(dir),
        None => {
            let store = SceneStore::generate(&cfg.world).map_err(|e| Error::Config(e.to_string()))?;
            let hash = sha256_hex(serde_json::to_string(&cfg.world)?.as_bytes());
            Ok(Dataset { config: cfg.world.clone(), store, hash })
        }
    }
}

/// Attention maps of the training split.
pub fn build_cache(store: &SceneStore, cfg: &RunConfig, scales: &ScaleSet, dataset_hash: &str) -> Result<AttentionCache> {
    let images: Vec<_> = (0..store.split_len(Split::Train)).map(|i| store.image(store.index(Split::Train, i))).collect();
    atgc::build_cache(&images, &cfg.encoder, scales, digest64(dataset_hash)).map_err(|e| Error::Other(e.to_string()))
}

/// Load the cache at `dir`, or build it when no directory is given.
pub fn cache(cfg: &RunConfig, data: &Dataset, scales: &ScaleSet, dir: Option<&Path>) -> Result<AttentionCache> {
    match dir {
        Some(d) => cache_io::read_cache(d, &cfg.encoder, scales, &data.hash),
        None => build_cache(&data.store, cfg, scales, &data.hash),
    }
}

pub fn train<A: SegmentationApi + ?Sized>(
    train: &TrainConfig,
    data: &Dataset,
    api: Option<&A>,
    cache: Option<&AttentionCache>,
    scales: &ScaleSet,
) -> Result<TrainOutcome> {
    let voc = Vocabulary::from_profiles(&data.config.profiles);
    Ok(trainer::train(train, &data.store, api, cache, scales, &voc)?)
}

pub fn evaluate(decoder: &bbd_core::student::LinearDecoder, store: &SceneStore) -> Result<ConfusionMatrix> {
    metrics::evaluate(decoder, store, Split::Val).map_err(|e| Error::Other(e.to_string()))
}

/// SHA-256 of the resolved config.
pub fn config_hash(cfg: &RunConfig) -> String {
    sha256_hex(cfg.to_json().as_bytes())
}
