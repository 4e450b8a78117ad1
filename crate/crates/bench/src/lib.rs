//! Fixtures shared by the benchmarks.

use std::collections::BTreeSet;

use twinsec_core::codec::Hash32;
use twinsec_core::ledger::{EntityKind, EntityRecord, Payload, ProvenanceEvent};
use twinsec_core::pipeline::{Quality, UnifiedRecord};
use twinsec_core::{Action, EntityId, Ledger, Quantity};

/// A ledger of `blocks` sealed blocks with `per_block` provenance entries each.
pub fn ledger(blocks: u64, per_block: usize) -> Ledger {
    let author = EntityId::from("operator-1");
    let mut l = Ledger::new();
    l.register_entity(
        EntityRecord {
            entity_id: author.clone(),
            kind: EntityKind::Human,
            mac_key: "operator-1".into(),
            access: BTreeSet::from([Action::UpdateRule]),
            registered_at: 0,
        },
        &author,
        0,
    )
    .expect("fresh registry");
    l.seal(0);
    for b in 1..blocks {
        append_block(&mut l, b * 100, per_block);
    }
    l
}

pub fn append_block(l: &mut Ledger, ts: u64, per_block: usize) {
    let author = EntityId::from("operator-1");
    for i in 0..per_block {
        l.stage(
            Payload::Provenance(ProvenanceEvent {
                subject: format!("speed-{i}"),
                event: "telemetry_anchor".into(),
                detail: String::new(),
                digest: Some(Hash32::of(&ts.to_be_bytes())),
                related: vec![],
            }),
            &author,
            ts,
        )
        .expect("registered author");
    }
    l.seal(ts);
}

/// `sources` speed readings around 1.0 m/s, all stamped `ts`.
pub fn records(sources: usize, ts: u64) -> Vec<UnifiedRecord> {
    (0..sources)
        .map(|i| UnifiedRecord {
            source: EntityId(format!("speed-{i}")),
            quantity: Quantity::Speed,
            value_si: 1.0 + 0.01 * i as f64,
            ts,
            seq: ts / 100,
            quality: Quality::empty(),
            aoi: 0,
            origin: None,
        })
        .collect()
}
