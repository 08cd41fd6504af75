//! Datasets on disk: `manifest.json` plus `train/` and `val/` directories of
//! BRF1 images (`img_%05d.brf1`) and truth maps (`gt_%05d.brf1`).

use std::fs;
use std::path::{Path, PathBuf};

use bbd_core::scenegen::{DatasetConfig, SceneStore, Split};
use serde::{Deserialize, Serialize};

use crate::brf;
use crate::error::{Error, Result};
use crate::hashing::{combine, digest64, sha256_hex};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub train: Vec<FileEntry>,
    pub val: Vec<FileEntry>,
    pub dataset_hash: String,
}

impl Manifest {
    fn all(&self) -> impl Iterator<Item = &FileEntry> {
        self.train.iter().chain(&self.val)
    }

    fn expected_hash(&self) -> String {
        combine(self.all().map(|e| (e.path.as_str(), e.sha256.as_str())))
    }
}

/// A dataset loaded and verified.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub store: SceneStore,
    pub hash: String,
}

impl Dataset {
    pub fn digest(&self) -> u64 {
        digest64(&self.hash)
    }
}

fn split_name(split: Split, i: usize, kind: &str) -> String {
    format!("{}/{kind}_{i:05}.brf1", split.name())
}

fn write_file(root: &Path, rel: &str, bytes: &[u8]) -> Result<FileEntry> {
    let path = root.join(rel);
    fs::write(&path, bytes).map_err(Error::io(&path))?;
    Ok(FileEntry { path: rel.to_string(), sha256: sha256_hex(bytes) })
}

/// Write an in-memory store under `root`, returning the manifest.
pub fn write_store(root: &Path, config: &DatasetConfig, store: &SceneStore) -> Result<Manifest> {
    let (w, h) = (store.width(), store.height());
    let mut lists = [Vec::new(), Vec::new()];
    for (slot, split) in [Split::Train, Split::Val].into_iter().enumerate() {
        let dir = root.join(split.name());
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        for i in 0..store.split_len(split) {
            let idx = store.index(split, i);
            let img = brf::encode_u8(w, h, 3, store.raw_image(idx));
            let gt = brf::encode_u8(w, h, 1, store.raw_truth(idx));
            lists[slot].push(write_file(root, &split_name(split, i, "img"), &img)?);
            lists[slot].push(write_file(root, &split_name(split, i, "gt"), &gt)?);
        }
    }
    let [train, val] = lists;
    let mut manifest = Manifest { config: config.clone(), train, val, dataset_hash: String::new() };
    manifest.dataset_hash = manifest.expected_hash();
    let text = serde_json::to_string_pretty(&manifest)?;
    let path = root.join(MANIFEST);
    fs::write(&path, text).map_err(Error::io(&path))?;
    Ok(manifest)
}

/// Generate the scenes of `config` and write them under `root`.
pub fn write_dataset(root: &Path, config: &DatasetConfig) -> Result<Dataset> {
    let store = SceneStore::generate(config).map_err(|e| Error::Config(e.to_string()))?;
    let manifest = write_store(root, config, &store)?;
    Ok(Dataset { config: config.clone(), store, hash: manifest.dataset_hash })
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Integrity(format!("missing {}", path.display())),
        _ => Error::Io { path: path.clone(), source: e },
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))
}

fn read_verified(root: &Path, entry: &FileEntry) -> Result<Vec<u8>> {
    let path: PathBuf = root.join(&entry.path);
    let bytes = fs::read(&path).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
    let got = sha256_hex(&bytes);
    if got != entry.sha256 {
        return Err(Error::Integrity(format!("{}: hash {got} does not match manifest {}", entry.path, entry.sha256)));
    }
    Ok(bytes)
}

/// Load a dataset, checking every file against the manifest.
pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let m = read_manifest(root)?;
    let cfg = &m.config;
    if m.dataset_hash != m.expected_hash() {
        return Err(Error::Integrity("manifest dataset_hash does not match its file list".into()));
    }
    if m.train.len() != 2 * cfg.n_train || m.val.len() != 2 * cfg.n_val {
        return Err(Error::Integrity("manifest file count does not match the config".into()));
    }
    let mut store = SceneStore::new(cfg.image_w, cfg.image_h, cfg.num_classes(), cfg.n_train);
    for pair in m.train.chunks(2).chain(m.val.chunks(2)) {
        let img = read_verified(root, &pair[0])?;
        let gt = read_verified(root, &pair[1])?;
        let (hi, img) = brf::decode_u8(&img)?;
        let (hg, gt) = brf::decode_u8(&gt)?;
        if (hi.width, hi.height, hi.channels) != (cfg.image_w, cfg.image_h, 3)
            || (hg.width, hg.height, hg.channels) != (cfg.image_w, cfg.image_h, 1)
        {
            return Err(Error::Integrity(format!("{}: unexpected raster shape", pair[0].path)));
        }
        store.push_raw(img.to_vec(), gt.to_vec());
    }
    Ok(Dataset { config: m.config.clone(), store, hash: m.dataset_hash })
}
