//! Stable hashing used for content-derived ids, cache keys and seed derivation.
//!
//! `std::hash` offers no cross-version stability guarantee, so everything that
//! ends up on disk or in a seed goes through SHA-256 instead.

use sha2::{Digest, Sha256};

/// Hex digest over a list of length-delimited parts.
pub fn sha_hex(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hex_encode(&hasher.finalize())
}

/// Derive a child RNG seed from a base seed and a list of labels.
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

fn hex_encode(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
