//! Checkpoints: one line of JSON header, then the weight block (`F` rows of
//! `K` columns) and the bias block (one row of `K`), each BRF1 `f32`.

use std::path::Path;

use bbd_core::raster::Raster;
use bbd_core::student::LinearDecoder;
use serde::{Deserialize, Serialize};

use crate::brf;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub k: usize,
    pub f: usize,
    pub iteration: u64,
    pub config_hash: String,
}

pub fn encode(decoder: &LinearDecoder, iteration: u64, config_hash: &str) -> Vec<u8> {
    let header = CheckpointHeader { k: decoder.k, f: decoder.f, iteration, config_hash: config_hash.into() };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    let w = Raster::new(decoder.k, decoder.f, 1, decoder.weights.clone()).expect("weight shape");
    let b = Raster::new(decoder.k, 1, 1, decoder.bias.clone()).expect("bias shape");
    out.extend(brf::encode_raster(&w));
    out.extend(brf::encode_raster(&b));
    out
}

fn take_block(bytes: &[u8]) -> Result<(Raster, &[u8])> {
    let head = bytes.get(..17).ok_or_else(|| Error::Integrity("truncated checkpoint block".into()))?;
    let dims: Vec<usize> =
        (0..3).map(|i| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize).collect();
    let len = 17 + 4 * dims[0] * dims[1] * dims[2];
    if bytes.len() < len {
        return Err(Error::Integrity("truncated checkpoint block".into()));
    }
    Ok((brf::decode_raster(&bytes[..len])?, &bytes[len..]))
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, LinearDecoder)> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Integrity("checkpoint has no header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
    let (w, rest) = take_block(&bytes[nl + 1..])?;
    let (b, rest) = take_block(rest)?;
    if !rest.is_empty() {
        return Err(Error::Integrity("trailing bytes after checkpoint".into()));
    }
    if (w.width(), w.height(), b.width(), b.height()) != (header.k, header.f, header.k, 1) {
        return Err(Error::Integrity("checkpoint blocks do not match the header".into()));
    }
    let decoder = LinearDecoder { k: header.k, f: header.f, weights: w.into_values(), bias: b.into_values() };
    Ok((header, decoder))
}

pub fn save(path: &Path, decoder: &LinearDecoder, iteration: u64, config_hash: &str) -> Result<()> {
    std::fs::write(path, encode(decoder, iteration, config_hash)).map_err(Error::io(path))
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, LinearDecoder)> {
    decode(&std::fs::read(path).map_err(Error::io(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_at_f32_precision() {
        let d = LinearDecoder { k: 2, f: 3, weights: vec![0.5, -1.0, 0.25, 2.0, 0.0, 1.5], bias: vec![0.125, -0.75] };
        let bytes = encode(&d, 17, "abc");
        let (h, back) = decode(&bytes).unwrap();
        assert_eq!(h, CheckpointHeader { k: 2, f: 3, iteration: 17, config_hash: "abc".into() });
        assert_eq!(back, d);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
