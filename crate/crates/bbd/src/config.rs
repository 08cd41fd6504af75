//! The JSON run configuration. Every section and field is optional; missing
//! ones take the defaults of the owning module, unknown ones are rejected.

use std::path::Path;

use bbd_core::atgc::{ScaleSet, DEFAULT_SCALES};
use bbd_core::blackbox::FidelityModel;
use bbd_core::encoder::EncoderConfig;
use bbd_core::scenegen::DatasetConfig;
use bbd_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEED_ENV: &str = "BBD_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApiConfig {
    /// Base URL of a running service; in-process when absent.
    pub url: Option<String>,
    /// Call budget of the in-process service.
    pub max_calls: Option<u64>,
    /// Seed of the simulated API's noise.
    pub seed: u64,
    /// Entries kept by the client's response cache; 0 disables it.
    pub response_cache: usize,
}

impl Default for ApiConfig {
    fn default() -> Self {
        ApiConfig { url: None, max_calls: None, seed: 0, response_cache: 4096 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: DatasetConfig,
    pub encoder: EncoderConfig,
    pub fidelity: FidelityModel,
    pub scales: Vec<f64>,
    pub train: TrainConfig,
    pub api: ApiConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: DatasetConfig::default(),
            encoder: EncoderConfig::default(),
            fidelity: FidelityModel::default(),
            scales: DEFAULT_SCALES.to_vec(),
            train: TrainConfig::default(),
            api: ApiConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Read `path` if given, else the defaults; then apply `BBD_SEED`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_json(&std::fs::read_to_string(p).map_err(Error::io(p))?)?,
            None => RunConfig::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.train.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scale_set(&self) -> Result<ScaleSet> {
        ScaleSet::new(self.scales.clone()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.encoder.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.fidelity.validate().map_err(|e| Error::Config(e.into()))?;
        let scales = self.scale_set()?;
        self.train
            .validate(&scales, self.world.image_w, self.world.image_h)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
