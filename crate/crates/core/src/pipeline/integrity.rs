//! The three integrity checks: registered source, cross-validation between
//! overlapping sensors, and age of information.

use serde::{Deserialize, Serialize};

use super::UnifiedRecord;
use crate::auth::{sample_tag_input, verify_tag, KeyStore};
use crate::ledger::Registry;
use crate::types::{Action, Ms};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Unregistered,
    BadAuth,
    NotPermitted,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Unregistered => "unregistered",
            RejectReason::BadAuth => "bad_auth",
            RejectReason::NotPermitted => "not_permitted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceVerdict {
    Accept,
    Reject(RejectReason),
}

/// Accepts a record only if its source is registered with `emit_data` and
/// its tag verifies under the registered key. Imputed records carry no tag
/// and are accepted on registration alone.
pub fn verify_source(rec: &UnifiedRecord, registry: &Registry, keys: &KeyStore) -> SourceVerdict {
    let Some(entity) = registry.get(&rec.source) else {
        return SourceVerdict::Reject(RejectReason::Unregistered);
    };
    if !entity.access.contains(&Action::EmitData) {
        return SourceVerdict::Reject(RejectReason::NotPermitted);
    }
    let Some(origin) = &rec.origin else {
        return SourceVerdict::Accept;
    };
    let msg = sample_tag_input(&rec.source, rec.quantity, origin.value, rec.ts, rec.seq);
    if verify_tag(&keys.key(&entity.mac_key), &msg, &origin.auth_tag) {
        SourceVerdict::Accept
    } else {
        SourceVerdict::Reject(RejectReason::BadAuth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Freshness {
    Fresh,
    Stale,
}

/// Stale iff `now - ts > max_aoi`.
pub fn check_aoi(rec: &UnifiedRecord, now: Ms, max_aoi: Ms) -> Freshness {
    let aoi = now as i64 - rec.ts as i64;
    if aoi > max_aoi as i64 {
        Freshness::Stale
    } else {
        Freshness::Fresh
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    pub flags: Vec<bool>,
    pub confidence: f64,
}

/// Compares co-temporal readings of one quantity. Within `eps` everything
/// passes with confidence 1; otherwise every reading is flagged and the
/// confidence drops to `eps / max_pairwise_difference`.
pub fn cross_validate(values: &[f64], eps: f64) -> CrossValidation {
    if values.len() < 2 {
        return CrossValidation {
            flags: vec![false; values.len()],
            confidence: 1.0,
        };
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = hi - lo;
    if spread <= eps {
        CrossValidation {
            flags: vec![false; values.len()],
            confidence: 1.0,
        }
    } else {
        CrossValidation {
            flags: vec![true; values.len()],
            confidence: (eps / spread).min(1.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::compute_tag;
    use crate::ledger::{EntityKind, EntityRecord};
    use crate::pipeline::{Origin, Quality};
    use crate::types::{EntityId, Quantity};

    fn record(source: &str, ts: Ms, tag: [u8; 32]) -> UnifiedRecord {
        UnifiedRecord {
            source: source.into(),
            quantity: Quantity::Speed,
            value_si: 1.0,
            ts,
            seq: 7,
            quality: Quality::empty(),
            aoi: 0,
            origin: Some(Origin {
                value: 1.0,
                auth_tag: tag,
            }),
        }
    }

    fn registry_with(id: &str, access: &[Action]) -> Registry {
        let mut r = Registry::default();
        r.insert(EntityRecord {
            entity_id: id.into(),
            kind: EntityKind::Sensor,
            mac_key: id.into(),
            access: access.iter().copied().collect(),
            registered_at: 0,
        });
        r
    }

    fn tag_for(keys: &KeyStore, key_ref: &str, source: &str) -> [u8; 32] {
        let msg = sample_tag_input(&EntityId::from(source), Quantity::Speed, 1.0, 100, 7);
        compute_tag(&keys.key(key_ref), &msg)
    }

    #[test]
    fn registered_with_valid_tag_accepted() {
        let keys = KeyStore::new(3);
        let reg = registry_with("s1", &[Action::EmitData]);
        let rec = record("s1", 100, tag_for(&keys, "s1", "s1"));
        assert_eq!(verify_source(&rec, &reg, &keys), SourceVerdict::Accept);
    }

    #[test]
    fn unregistered_rejected() {
        let keys = KeyStore::new(3);
        let reg = registry_with("s1", &[Action::EmitData]);
        let rec = record("rogue", 100, tag_for(&keys, "rogue", "rogue"));
        assert_eq!(
            verify_source(&rec, &reg, &keys),
            SourceVerdict::Reject(RejectReason::Unregistered)
        );
    }

    #[test]
    fn wrong_key_rejected() {
        let keys = KeyStore::new(3);
        let reg = registry_with("s1", &[Action::EmitData]);
        let wrong = tag_for(&keys, "not-s1", "s1");
        // Oracle: the correct tag differs from the forged one.
        assert_ne!(wrong, tag_for(&keys, "s1", "s1"));
        let rec = record("s1", 100, wrong);
        assert_eq!(
            verify_source(&rec, &reg, &keys),
            SourceVerdict::Reject(RejectReason::BadAuth)
        );
    }

    #[test]
    fn missing_emit_permission_rejected() {
        let keys = KeyStore::new(3);
        let reg = registry_with("s1", &[Action::IssueCommand]);
        let rec = record("s1", 100, tag_for(&keys, "s1", "s1"));
        assert_eq!(
            verify_source(&rec, &reg, &keys),
            SourceVerdict::Reject(RejectReason::NotPermitted)
        );
    }

    #[test]
    fn aoi_bounds() {
        let r = record("s1", 900, [0; 32]);
        assert_eq!(check_aoi(&r, 1000, 200), Freshness::Fresh);
        let r = record("s1", 700, [0; 32]);
        assert_eq!(check_aoi(&r, 1000, 200), Freshness::Stale);
        let r = record("s1", 800, [0; 32]);
        assert_eq!(check_aoi(&r, 1000, 200), Freshness::Fresh);
    }

    #[test]
    fn cross_validation_examples() {
        let ok = cross_validate(&[1.00, 1.05], 0.1);
        assert_eq!(ok.confidence, 1.0);
        assert_eq!(ok.flags, vec![false, false]);

        let bad = cross_validate(&[1.0, 1.3], 0.1);
        assert!((bad.confidence - 0.1 / 0.3).abs() < 1e-12);
        assert_eq!(bad.flags, vec![true, true]);

        let single = cross_validate(&[4.2], 0.1);
        assert_eq!(single.confidence, 1.0);
        assert_eq!(single.flags, vec![false]);
    }
}
