//! SHA-256 helpers for content addressing.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Digest of a value's JSON serialization. `serde_json` keeps struct field
/// order and `BTreeMap` key order, so equal values give equal digests.
pub fn json_digest<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("in-memory JSON serialization");
    sha256_hex(bytes)
}

/// Digest of an ordered list of texts, framed by length so that
/// `["ab", "c"]` and `["a", "bc"]` differ.
pub fn texts_digest<S: AsRef<str>>(texts: &[S]) -> String {
    let mut hasher = Sha256::new();
    for t in texts {
        let t = t.as_ref();
        hasher.update((t.len() as u64).to_le_bytes());
        hasher.update(t.as_bytes());
    }
    hex::encode(hasher.finalize())
}

pub fn short(digest: &str) -> &str {
    &digest[..digest.len().min(12)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_sha256() {
        assert_eq!(
            sha256_hex("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn framing_separates_splits() {
        assert_ne!(texts_digest(&["ab", "c"]), texts_digest(&["a", "bc"]));
        assert_eq!(texts_digest::<&str>(&[]), texts_digest::<String>(&[]));
    }
}
