//! Canonical serialization and content digests.
//!
//! Canonical bytes are the compact JSON rendering of a value with object keys
//! in lexicographic order. `serde_json::Map` is ordered by key (the
//! `preserve_order` feature is never enabled in this workspace), so converting
//! through `serde_json::Value` is sufficient.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Lowercase hex rendering of the all-zero 32-byte digest.
pub const GENESIS_DIGEST: &str =
    "0000000000000000000000000000000000000000000000000000000000000000";

pub fn to_canonical_value<T: Serialize + ?Sized>(value: &T) -> Value {
    serde_json::to_value(value).expect("domain types always serialize to JSON")
}

pub fn canonical_bytes<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let v = to_canonical_value(value);
    serde_json::to_vec(&v).expect("JSON values always serialize")
}

pub fn canonical_string<T: Serialize + ?Sized>(value: &T) -> String {
    String::from_utf8(canonical_bytes(value)).expect("serde_json emits UTF-8")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_of<T: Serialize + ?Sized>(value: &T) -> String {
    sha256_hex(&canonical_bytes(value))
}

/// Number of whitespace-separated words in `text`.
pub fn word_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_are_sorted_and_compact() {
        let v = json!({"b": 1, "a": {"d": [1, 2], "c": "x"}});
        assert_eq!(canonical_string(&v), r#"{"a":{"c":"x","d":[1,2]},"b":1}"#);
    }

    #[test]
    fn digest_is_stable() {
        // sha256("[]")
        assert_eq!(
            digest_of(&Vec::<u8>::new()),
            "4f53cda18c2baa0c0354bb5f9a3ecbe5ed12ab4d8e11ba873c2f11161202b945"
        );
    }
}
