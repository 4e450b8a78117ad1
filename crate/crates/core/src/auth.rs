//! Per-entity MAC keys and sample authentication tags.

use std::collections::BTreeMap;

use hmac::{Hmac, KeyInit, Mac};
use sha2::Sha256;

use crate::codec::{Encoder, Hash32};
use crate::types::{EntityId, Ms, Quantity};

type HmacSha256 = Hmac<Sha256>;

/// Opaque name under which an entity's key is held. Only the reference is
/// ever written to the ledger.
pub type KeyRef = String;

/// Deterministic key material derived from a master seed.
///
/// Keys are `SHA-256("twinsec-key" ‖ seed ‖ key_ref)`, so every run of the
/// same scenario provisions the same keys without storing them anywhere.
#[derive(Debug, Clone)]
pub struct KeyStore {
    seed: u64,
    overrides: BTreeMap<KeyRef, [u8; 32]>,
}

impl KeyStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            overrides: BTreeMap::new(),
        }
    }

    pub fn key(&self, key_ref: &str) -> [u8; 32] {
        if let Some(k) = self.overrides.get(key_ref) {
            return *k;
        }
        let mut enc = Encoder::new();
        enc.str("twinsec-key").u64(self.seed).str(key_ref);
        Hash32::of(&enc.finish()).0
    }

    /// Pins an explicit key for `key_ref`.
    pub fn insert(&mut self, key_ref: impl Into<KeyRef>, key: [u8; 32]) {
        self.overrides.insert(key_ref.into(), key);
    }
}

/// Bytes covered by a sample's tag: (source, quantity, value, ts, seq).
pub fn sample_tag_input(
    source: &EntityId,
    quantity: Quantity,
    value: f64,
    ts: Ms,
    seq: u64,
) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.str(source.as_str())
        .u8(quantity.tag())
        .f64(value)
        .u64(ts)
        .u64(seq);
    enc.finish()
}

pub fn compute_tag(key: &[u8; 32], msg: &[u8]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(msg);
    mac.finalize().into_bytes().into()
}

pub fn verify_tag(key: &[u8; 32], msg: &[u8], tag: &[u8; 32]) -> bool {
    let mut mac = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    mac.update(msg);
    mac.verify_slice(tag).is_ok()
}
