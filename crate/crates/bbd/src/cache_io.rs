//! Attention caches on disk: `manifest.json` plus one BRF1 `f32` map per
//! image and scale, `attn_%05d_s%02d.brf1`.

use std::fs;
use std::path::Path;

use bbd_core::atgc::{AttentionCache, ScaleSet};
use bbd_core::encoder::EncoderConfig;
use serde::{Deserialize, Serialize};

use crate::brf;
use crate::dataset::{FileEntry, MANIFEST};
use crate::error::{Error, Result};
use crate::hashing::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheManifest {
    pub encoder: EncoderConfig,
    pub encoder_hash: String,
    pub scales: Vec<f64>,
    pub dataset_hash: String,
    pub image_w: usize,
    pub image_h: usize,
    pub n_images: usize,
    pub files: Vec<FileEntry>,
}

impl CacheManifest {
    fn matches(&self, encoder: &EncoderConfig, scales: &ScaleSet, dataset_hash: &str) -> bool {
        self.encoder_hash == encoder_hash(encoder) && self.scales == scales.scales() && self.dataset_hash == dataset_hash
    }
}

pub fn encoder_hash(cfg: &EncoderConfig) -> String {
    format!("{:016x}", cfg.digest())
}

fn entry_name(image: usize, scale: usize) -> String {
    format!("attn_{image:05}_s{scale:02}.brf1")
}

/// What [`write_cache`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    Written,
    /// A verified cache for the same inputs was already there.
    Unchanged,
}

/// Persist `cache`; a no-op when `root` already holds a verified cache built
/// from the same encoder, scales and dataset.
pub fn write_cache(root: &Path, cache: &AttentionCache, dataset_hash: &str) -> Result<WriteOutcome> {
    if root.join(MANIFEST).exists() {
        if let Ok(m) = read_manifest(root) {
            if m.matches(&cache.encoder, &cache.scales, dataset_hash) && verify_files(root, &m).is_ok() {
                return Ok(WriteOutcome::Unchanged);
            }
        }
    }
    fs::create_dir_all(root).map_err(Error::io(root))?;
    let mut files = Vec::with_capacity(cache.n_images() * cache.scales.len());
    for i in 0..cache.n_images() {
        for j in 0..cache.scales.len() {
            let map = cache.get(i, j).map_err(|e| Error::Other(e.to_string()))?;
            let bytes = brf::encode_raster(map);
            let name = entry_name(i, j);
            let path = root.join(&name);
            fs::write(&path, &bytes).map_err(Error::io(&path))?;
            files.push(FileEntry { path: name, sha256: sha256_hex(&bytes) });
        }
    }
    let manifest = CacheManifest {
        encoder: cache.encoder.clone(),
        encoder_hash: encoder_hash(&cache.encoder),
        scales: cache.scales.scales().to_vec(),
        dataset_hash: dataset_hash.to_string(),
        image_w: cache.image_w,
        image_h: cache.image_h,
        n_images: cache.n_images(),
        files,
    };
    let path = root.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(Error::io(&path))?;
    Ok(WriteOutcome::Written)
}

pub fn read_manifest(root: &Path) -> Result<CacheManifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))
}

fn verify_files(root: &Path, m: &CacheManifest) -> Result<Vec<Vec<u8>>> {
    if m.files.len() != m.n_images * m.scales.len() {
        return Err(Error::Integrity("cache manifest entry count is wrong".into()));
    }
    m.files
        .iter()
        .map(|e| {
            let path = root.join(&e.path);
            let bytes = fs::read(&path).map_err(|err| Error::Integrity(format!("{}: {err}", path.display())))?;
            if sha256_hex(&bytes) != e.sha256 {
                return Err(Error::Integrity(format!("{}: hash does not match manifest", e.path)));
            }
            Ok(bytes)
        })
        .collect()
}

/// Load a cache, requiring it to match the encoder, scales and dataset in use.
pub fn read_cache(root: &Path, encoder: &EncoderConfig, scales: &ScaleSet, dataset_hash: &str) -> Result<AttentionCache> {
    let m = read_manifest(root)?;
    if !m.matches(encoder, scales, dataset_hash) {
        return Err(Error::Integrity(format!(
            "cache at {} was built for another encoder, scale set or dataset",
            root.display()
        )));
    }
    let blobs = verify_files(root, &m)?;
    let digest = crate::hashing::digest64(dataset_hash);
    let mut cache = AttentionCache::empty(encoder.clone(), scales.clone(), m.image_w, m.image_h, m.n_images, digest);
    let (gw, gh) = cache.grid_dims();
    for (n, bytes) in blobs.iter().enumerate() {
        let map = brf::decode_raster(bytes)?;
        if (map.width(), map.height(), map.channels()) != (gw, gh, 1) {
            return Err(Error::Integrity(format!("{}: map is not on the {gw}x{gh} grid", m.files[n].path)));
        }
        cache.insert(n / m.scales.len(), n % m.scales.len(), map);
    }
    Ok(cache)
}
