//! The API as seen by a trainer: in-process or over HTTP, behind a bounded
//! LRU response cache. Both paths push the image through BRF1 so they see
//! the same `f32` samples and return byte-identical masks.

use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bbd_core::blackbox::{ApiError, BlackBox, BudgetSnapshot, SegmentationApi, Vocabulary};
use bbd_core::raster::{ClassMap, Raster};
use lru::LruCache;
use sha2::{Digest, Sha256};

use crate::brf;
use crate::wire::{from_base64, to_base64, ErrorBody, SegmentRequest, SegmentResponse};

type Key = ([u8; 32], u64, [usize; 2]);

enum Backend {
    InProcess(Arc<BlackBox>),
    Remote { base: String, agent: ureq::Agent },
}

pub struct Client {
    backend: Backend,
    cache: Option<Mutex<LruCache<Key, Arc<Vec<u8>>>>>,
    calls: AtomicU64,
    hits: AtomicU64,
}

impl Client {
    pub fn in_process(api: Arc<BlackBox>, cache_capacity: usize) -> Self {
        Self::with_backend(Backend::InProcess(api), cache_capacity)
    }

    pub fn remote(base_url: &str, cache_capacity: usize) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(60)).build();
        Self::with_backend(Backend::Remote { base: base_url.trim_end_matches('/').to_string(), agent }, cache_capacity)
    }

    fn with_backend(backend: Backend, cache_capacity: usize) -> Self {
        let cache = NonZeroUsize::new(cache_capacity).map(|n| Mutex::new(LruCache::new(n)));
        Client { backend, cache, calls: AtomicU64::new(0), hits: AtomicU64::new(0) }
    }

    pub fn cache_hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }

    /// The mask as BRF1 bytes, from the cache when possible.
    pub fn segment_bytes(&self, image: &Raster, vocabulary: &Vocabulary, base_crop: (usize, usize)) -> Result<Arc<Vec<u8>>, ApiError> {
        let bytes = brf::encode_raster(image);
        let key: Key = (Sha256::digest(&bytes).into(), vocabulary.digest(), [base_crop.0, base_crop.1]);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.lock().expect("cache lock").get(&key) {
                self.hits.fetch_add(1, Ordering::SeqCst);
                return Ok(hit.clone());
            }
        }
        let mask = Arc::new(match &self.backend {
            Backend::InProcess(api) => {
                let image = brf::decode_raster(&bytes).expect("own encoding");
                let mask = api.segment(&image, vocabulary, base_crop)?;
                api.budget().record_bytes(bytes.len() as u64, 0);
                brf::encode_classmap(&mask).map_err(|e| ApiError::Malformed(e.to_string()))?
            }
            Backend::Remote { base, agent } => post_segment(agent, base, &bytes, vocabulary, base_crop)?,
        });
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(cache) = &self.cache {
            cache.lock().expect("cache lock").put(key, mask.clone());
        }
        Ok(mask)
    }

    /// Service-side counters.
    pub fn budget(&self) -> Result<BudgetSnapshot, ApiError> {
        match &self.backend {
            Backend::InProcess(api) => Ok(api.budget().snapshot()),
            Backend::Remote { base, agent } => agent
                .get(&format!("{base}/budget"))
                .call()
                .map_err(transport)?
                .into_json()
                .map_err(|e| ApiError::Malformed(e.to_string())),
        }
    }
}

fn transport(e: ureq::Error) -> ApiError {
    ApiError::Transport(e.to_string())
}

fn post_segment(
    agent: &ureq::Agent,
    base: &str,
    image: &[u8],
    vocabulary: &Vocabulary,
    base_crop: (usize, usize),
) -> Result<Vec<u8>, ApiError> {
    let req = SegmentRequest { image: to_base64(image), vocabulary: vocabulary.clone(), base_crop: [base_crop.0, base_crop.1] };
    let resp = agent.post(&format!("{base}/segment")).send_json(&req);
    let body: SegmentResponse = match resp {
        Ok(r) => r.into_json().map_err(|e| ApiError::Malformed(e.to_string()))?,
        Err(ureq::Error::Status(code, r)) => {
            let err: Option<ErrorBody> = r.into_json().ok();
            return Err(match (code, err) {
                (429, Some(ErrorBody { calls_used: Some(used), max_calls: Some(max), .. })) => ApiError::Quota { used, max },
                (429, _) => ApiError::Quota { used: 0, max: 0 },
                (_, Some(b)) => ApiError::Malformed(format!("HTTP {code}: {}", b.error)),
                (_, None) => ApiError::Transport(format!("HTTP {code}")),
            });
        }
        Err(e) => return Err(transport(e)),
    };
    let mask = from_base64(&body.mask).map_err(|e| ApiError::Malformed(e.to_string()))?;
    brf::decode_classmap(&mask).map_err(|e| ApiError::Malformed(e.to_string()))?;
    Ok(mask)
}

impl SegmentationApi for Client {
    fn segment(&self, image: &Raster, vocabulary: &Vocabulary, base_crop: (usize, usize)) -> Result<ClassMap, ApiError> {
        let bytes = self.segment_bytes(image, vocabulary, base_crop)?;
        brf::decode_classmap(&bytes).map_err(|e| ApiError::Malformed(e.to_string()))
    }

    /// Calls this client was charged for; cache hits are free.
    fn calls_used(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}
