//! BRF1 raster files: `"BRF1"`, little-endian `u32` width, height and
//! channels, a `u8` dtype tag, then the row-major, channel-planar payload.

use bbd_core::raster::{ClassMap, Label, Raster, IGNORE};

pub const MAGIC: &[u8; 4] = b"BRF1";
const HEADER_LEN: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    U8 = 0,
    F32 = 1,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BrfError {
    #[error("not a BRF1 payload")]
    Magic,
    #[error("truncated BRF1 payload: expected {expected} bytes, got {got}")]
    Length { expected: usize, got: usize },
    #[error("unknown BRF1 dtype {0}")]
    Dtype(u8),
    #[error("expected {expected} channel(s), found {got}")]
    Channels { expected: usize, got: usize },
    #[error("class maps need the u8 dtype")]
    LabelDtype,
    #[error("label {0} does not fit in 8 bits")]
    LabelRange(Label),
}

/// Decoded header plus payload offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub dtype: Dtype,
}

fn write_header(out: &mut Vec<u8>, h: Header) {
    out.extend_from_slice(MAGIC);
    for v in [h.width, h.height, h.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(h.dtype as u8);
}

pub fn read_header(bytes: &[u8]) -> Result<Header, BrfError> {
    if bytes.len() < HEADER_LEN {
        return Err(BrfError::Length { expected: HEADER_LEN, got: bytes.len() });
    }
    if &bytes[..4] != MAGIC {
        return Err(BrfError::Magic);
    }
    let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let dtype = match bytes[16] {
        0 => Dtype::U8,
        1 => Dtype::F32,
        t => return Err(BrfError::Dtype(t)),
    };
    let h = Header { width: u(4), height: u(8), channels: u(12), dtype };
    let per = if dtype == Dtype::U8 { 1 } else { 4 };
    let expected = h.width.checked_mul(h.height).and_then(|n| n.checked_mul(h.channels)).and_then(|n| n.checked_mul(per));
    match expected.map(|n| n + HEADER_LEN) {
        Some(n) if n == bytes.len() => Ok(h),
        Some(n) => Err(BrfError::Length { expected: n, got: bytes.len() }),
        None => Err(BrfError::Length { expected: usize::MAX, got: bytes.len() }),
    }
}

/// Raw 8-bit planes, as kept by the dataset store.
pub fn encode_u8(width: usize, height: usize, channels: usize, payload: &[u8]) -> Vec<u8> {
    assert_eq!(payload.len(), width * height * channels, "payload size");
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    write_header(&mut out, Header { width, height, channels, dtype: Dtype::U8 });
    out.extend_from_slice(payload);
    out
}

pub fn decode_u8(bytes: &[u8]) -> Result<(Header, &[u8]), BrfError> {
    let h = read_header(bytes)?;
    if h.dtype != Dtype::U8 {
        return Err(BrfError::LabelDtype);
    }
    Ok((h, &bytes[HEADER_LEN..]))
}

/// A raster as `f32` samples.
pub fn encode_raster(r: &Raster) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * r.values().len());
    write_header(&mut out, Header { width: r.width(), height: r.height(), channels: r.channels(), dtype: Dtype::F32 });
    for &v in r.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Either dtype; u8 samples map to `v / 255`.
pub fn decode_raster(bytes: &[u8]) -> Result<Raster, BrfError> {
    let h = read_header(bytes)?;
    let body = &bytes[HEADER_LEN..];
    let values: Vec<f64> = match h.dtype {
        Dtype::U8 => body.iter().map(|&b| b as f64 / 255.0).collect(),
        Dtype::F32 => body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
    };
    Ok(Raster::new(h.width, h.height, h.channels, values).expect("length checked by the header"))
}

/// Labels as one u8 channel, 255 for IGNORE.
pub fn encode_classmap(m: &ClassMap) -> Result<Vec<u8>, BrfError> {
    let mut payload = Vec::with_capacity(m.labels().len());
    for &l in m.labels() {
        payload.push(match l {
            IGNORE => 255,
            l if l < 255 => l as u8,
            l => return Err(BrfError::LabelRange(l)),
        });
    }
    Ok(encode_u8(m.width(), m.height(), 1, &payload))
}

pub fn decode_classmap(bytes: &[u8]) -> Result<ClassMap, BrfError> {
    let (h, body) = decode_u8(bytes)?;
    if h.channels != 1 {
        return Err(BrfError::Channels { expected: 1, got: h.channels });
    }
    let labels = body.iter().map(|&b| if b == 255 { IGNORE } else { b as Label }).collect();
    Ok(ClassMap::new(h.width, h.height, labels).expect("length checked by the header"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let bytes = encode_u8(2, 1, 1, &[7, 9]);
        assert_eq!(bytes, [b'B', b'R', b'F', b'1', 2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 7, 9]);
    }

    #[test]
    fn f32_round_trip() {
        let r = Raster::new(2, 1, 2, vec![0.5, 0.25, 1.0, -3.0]).unwrap();
        assert_eq!(decode_raster(&encode_raster(&r)).unwrap(), r);
    }

    #[test]
    fn classmap_round_trip_keeps_ignore() {
        let m = ClassMap::new(3, 1, vec![0, IGNORE, 7]).unwrap();
        let bytes = encode_classmap(&m).unwrap();
        assert_eq!(bytes[HEADER_LEN..], [0, 255, 7]);
        assert_eq!(decode_classmap(&bytes).unwrap(), m);
    }

    #[test]
    fn rejects_damage() {
        let mut bytes = encode_u8(2, 2, 1, &[0; 4]);
        assert_eq!(read_header(&bytes[..10]), Err(BrfError::Length { expected: HEADER_LEN, got: 10 }));
        bytes.pop();
        assert!(matches!(read_header(&bytes), Err(BrfError::Length { .. })));
        bytes.push(0);
        bytes[16] = 9;
        assert_eq!(read_header(&bytes), Err(BrfError::Dtype(9)));
        bytes[0] = b'X';
        assert_eq!(read_header(&bytes), Err(BrfError::Magic));
    }
}
