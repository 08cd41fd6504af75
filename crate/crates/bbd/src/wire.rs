//! JSON bodies of the HTTP protocol. Images and masks travel as base64 BRF1.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use bbd_core::blackbox::Vocabulary;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image: String,
    pub vocabulary: Vocabulary,
    pub base_crop: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub mask: String,
    pub calls_used: u64,
    pub calls_remaining: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default)]
    pub calls_used: Option<u64>,
    #[serde(default)]
    pub max_calls: Option<u64>,
}

pub fn to_base64(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn from_base64(text: &str) -> Result<Vec<u8>, base64::DecodeError> {
    STANDARD.decode(text)
}
