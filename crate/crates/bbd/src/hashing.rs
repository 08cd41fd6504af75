use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of an ordered list of `(name, hash)` entries.
pub fn combine<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    let mut h = Sha256::new();
    for (name, hash) in entries {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(hash.as_bytes());
        h.update([b'\n']);
    }
    hex::encode(h.finalize())
}

/// First 8 bytes of a hex SHA-256, for the core's 64-bit digests.
pub fn digest64(hex_hash: &str) -> u64 {
    let bytes = hex::decode(&hex_hash[..16]).expect("hex hash");
    u64::from_le_bytes(bytes.try_into().expect("8 bytes"))
}
