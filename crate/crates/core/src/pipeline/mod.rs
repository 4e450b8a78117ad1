//! Data wrangling, integrity checks and fusion between the plant and the
//! twin's data sync.

pub mod fusion;
pub mod integrity;
pub mod knowledge;
pub mod wrangle;

use std::collections::BTreeMap;
use std::ops::{BitAnd, BitOr, BitOrAssign};

use serde::{Deserialize, Serialize};

use crate::auth::KeyStore;
use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::ledger::{Ledger, LedgerError, Payload, ProvenanceEvent};
use crate::plant::TelemetrySample;
use crate::types::{EntityId, Ms, Quantity};

pub use fusion::{fuse, FusionConfig};
pub use integrity::{
    check_aoi, cross_validate, verify_source, CrossValidation, Freshness, RejectReason,
    SourceVerdict,
};
pub use knowledge::{Bound, DeviceConfig, EngineeringKnowledge, Relation, CONTROL_DUTY};
pub use wrangle::{clean, wrangle, Expectation, WrangleContext, WrangleOutput};

/// Quality flag set of a [`UnifiedRecord`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Quality(u8);

impl Quality {
    pub const DEDUPLICATED: Quality = Quality(1);
    pub const IMPUTED: Quality = Quality(2);
    pub const OUT_OF_RANGE: Quality = Quality(4);
    pub const UNIT_CONVERTED: Quality = Quality(8);

    pub fn empty() -> Self {
        Quality(0)
    }

    pub fn contains(self, other: Quality) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn bits(self) -> u8 {
        self.0
    }
}

impl BitOr for Quality {
    type Output = Quality;
    fn bitor(self, rhs: Self) -> Self {
        Quality(self.0 | rhs.0)
    }
}

impl BitOrAssign for Quality {
    fn bitor_assign(&mut self, rhs: Self) {
        self.0 |= rhs.0;
    }
}

impl BitAnd for Quality {
    type Output = Quality;
    fn bitand(self, rhs: Self) -> Self {
        Quality(self.0 & rhs.0)
    }
}

impl std::fmt::Debug for Quality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names = [
            (Quality::DEDUPLICATED, "deduplicated"),
            (Quality::IMPUTED, "imputed"),
            (Quality::OUT_OF_RANGE, "out_of_range"),
            (Quality::UNIT_CONVERTED, "unit_converted"),
        ];
        let set: Vec<_> = names
            .iter()
            .filter(|(q, _)| self.contains(*q))
            .map(|(_, n)| *n)
            .collect();
        write!(f, "{{{}}}", set.join(","))
    }
}

/// Reading and tag exactly as emitted, kept for source verification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Origin {
    pub value: f64,
    pub auth_tag: [u8; 32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedRecord {
    pub source: EntityId,
    pub quantity: Quantity,
    pub value_si: f64,
    pub ts: Ms,
    pub seq: u64,
    pub quality: Quality,
    /// Receive time minus `ts`; negative values indicate a clock anomaly.
    pub aoi: i64,
    /// `None` for imputed records.
    pub origin: Option<Origin>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordRef {
    pub source: EntityId,
    pub seq: u64,
    pub ts: Ms,
    pub imputed: bool,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimate: f64,
    pub confidence: f64,
    pub sources: Vec<RecordRef>,
}

/// One fused observation of the plant per sync window.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FusedFrame {
    pub ts: Ms,
    pub values: BTreeMap<String, Estimate>,
    pub aux: BTreeMap<String, String>,
    pub twin_inputs: BTreeMap<String, f64>,
}

impl FusedFrame {
    pub fn value(&self, quantity: &str) -> Option<f64> {
        self.values.get(quantity).map(|e| e.estimate)
    }
}

impl Canonical for FusedFrame {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.ts).u32(self.values.len() as u32);
        for (q, e) in &self.values {
            enc.str(q)
                .f64(e.estimate)
                .f64(e.confidence)
                .u32(e.sources.len() as u32);
            for s in &e.sources {
                enc.str(s.source.as_str())
                    .u64(s.seq)
                    .u64(s.ts)
                    .bool(s.imputed)
                    .bool(s.flagged);
            }
        }
        enc.u32(self.aux.len() as u32);
        for (k, v) in &self.aux {
            enc.str(k).str(v);
        }
        enc.u32(self.twin_inputs.len() as u32);
        for (k, v) in &self.twin_inputs {
            enc.str(k).f64(*v);
        }
    }
}

impl FusedFrame {
    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let ts = dec.u64()?;
        let mut values = BTreeMap::new();
        for _ in 0..dec.u32()? {
            let q = dec.str()?;
            let estimate = dec.f64()?;
            let confidence = dec.f64()?;
            let mut sources = Vec::new();
            for _ in 0..dec.u32()? {
                sources.push(RecordRef {
                    source: EntityId(dec.str()?),
                    seq: dec.u64()?,
                    ts: dec.u64()?,
                    imputed: dec.bool()?,
                    flagged: dec.bool()?,
                });
            }
            values.insert(
                q,
                Estimate {
                    estimate,
                    confidence,
                    sources,
                },
            );
        }
        let mut aux = BTreeMap::new();
        for _ in 0..dec.u32()? {
            let k = dec.str()?;
            aux.insert(k, dec.str()?);
        }
        let mut twin_inputs = BTreeMap::new();
        for _ in 0..dec.u32()? {
            let k = dec.str()?;
            twin_inputs.insert(k, dec.f64()?);
        }
        Ok(FusedFrame {
            ts,
            values,
            aux,
            twin_inputs,
        })
    }
}

/// A message observed on the network: who talked to whom.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetEvent {
    pub sender: EntityId,
    pub receiver: EntityId,
    pub channel: String,
    pub ts: Ms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntegrityKind {
    Rejected { reason: RejectReason },
    Stale { aoi_ms: i64 },
    SeqRegression { last_seq: u64 },
    UnknownUnit { unit: String },
}

impl IntegrityKind {
    pub fn label(&self) -> &'static str {
        match self {
            IntegrityKind::Rejected { .. } => "rejected",
            IntegrityKind::Stale { .. } => "stale",
            IntegrityKind::SeqRegression { .. } => "seq_regression",
            IntegrityKind::UnknownUnit { .. } => "unknown_unit",
        }
    }
}

/// A record the pipeline refused or flagged, as reported to threat
/// intelligence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrityEvent {
    /// Time the pipeline noticed.
    pub ts: Ms,
    pub source: EntityId,
    pub sample_ts: Ms,
    pub seq: u64,
    #[serde(flatten)]
    pub kind: IntegrityKind,
}

impl IntegrityEvent {
    pub fn detail(&self) -> String {
        match &self.kind {
            IntegrityKind::Rejected { reason } => format!(
                "reason={} sample_ts={} seq={}",
                reason.as_str(),
                self.sample_ts,
                self.seq
            ),
            IntegrityKind::Stale { aoi_ms } => format!(
                "aoi_ms={} sample_ts={} seq={}",
                aoi_ms, self.sample_ts, self.seq
            ),
            IntegrityKind::SeqRegression { last_seq } => {
                format!(
                    "seq={} last_seq={} sample_ts={}",
                    self.seq, last_seq, self.sample_ts
                )
            }
            IntegrityKind::UnknownUnit { unit } => {
                format!("unit={} sample_ts={}", unit, self.sample_ts)
            }
        }
    }
}

/// A sample as delivered to the pipeline's receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivered {
    pub channel: String,
    pub received_at: Ms,
    pub sample: TelemetrySample,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub window_ms: Ms,
    pub max_aoi_ms: Ms,
    pub expected: BTreeMap<EntityId, Expectation>,
    pub knowledge: EngineeringKnowledge,
    pub fusion: FusionConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub received: u64,
    pub accepted: u64,
    pub imputed: u64,
    pub duplicates: u64,
    pub unknown_units: u64,
    pub rejected: u64,
    pub stale: u64,
    pub seq_regressions: u64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub frame: FusedFrame,
    pub accepted: Vec<UnifiedRecord>,
    pub integrity: Vec<IntegrityEvent>,
    pub net_events: Vec<NetEvent>,
}

/// Stateful driver running wrangle → verify → freshness → fuse once per
/// sync window and recording refusals as provenance.
pub struct Pipeline {
    cfg: PipelineConfig,
    receiver: EntityId,
    last: BTreeMap<EntityId, UnifiedRecord>,
    prev_end: Ms,
    stats: PipelineStats,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, receiver: EntityId) -> Self {
        Self {
            cfg,
            receiver,
            last: BTreeMap::new(),
            prev_end: 0,
            stats: PipelineStats::default(),
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &PipelineStats {
        &self.stats
    }

    /// Processes everything received in `(previous window end, now]`.
    pub fn process(
        &mut self,
        now: Ms,
        inbox: &[Delivered],
        aux: &BTreeMap<String, String>,
        ledger: &mut Ledger,
        keys: &KeyStore,
    ) -> Result<PipelineOutput, LedgerError> {
        let net_events = inbox
            .iter()
            .map(|d| NetEvent {
                sender: d.sample.source.clone(),
                receiver: self.receiver.clone(),
                channel: d.channel.clone(),
                ts: d.received_at,
            })
            .collect();

        let raw: Vec<TelemetrySample> = inbox.iter().map(|d| d.sample.clone()).collect();
        self.stats.received += raw.len() as u64;
        let ctx = WrangleContext {
            window_start: self.prev_end,
            window_end: now,
            now,
            expected: self.cfg.expected.clone(),
            last: self.last.clone(),
            knowledge: self.cfg.knowledge.clone(),
            max_gap_ms: Some(self.cfg.max_aoi_ms),
        };
        let wrangled = wrangle(&raw, &ctx);
        self.stats.duplicates += wrangled.duplicates as u64;

        let mut integrity = Vec::new();
        for u in &wrangled.unknown_units {
            integrity.push(IntegrityEvent {
                ts: now,
                source: u.source.clone(),
                sample_ts: u.ts,
                seq: 0,
                kind: IntegrityKind::UnknownUnit {
                    unit: u.unit.clone(),
                },
            });
        }
        for r in &wrangled.seq_regressions {
            integrity.push(IntegrityEvent {
                ts: now,
                source: r.source.clone(),
                sample_ts: r.ts,
                seq: r.seq,
                kind: IntegrityKind::SeqRegression {
                    last_seq: r.last_seq,
                },
            });
        }

        let mut accepted = Vec::new();
        for rec in wrangled.records {
            if let SourceVerdict::Reject(reason) = verify_source(&rec, ledger.registry(), keys) {
                integrity.push(IntegrityEvent {
                    ts: now,
                    source: rec.source.clone(),
                    sample_ts: rec.ts,
                    seq: rec.seq,
                    kind: IntegrityKind::Rejected { reason },
                });
                continue;
            }
            if check_aoi(&rec, now, self.cfg.max_aoi_ms) == Freshness::Stale {
                integrity.push(IntegrityEvent {
                    ts: now,
                    source: rec.source.clone(),
                    sample_ts: rec.ts,
                    seq: rec.seq,
                    kind: IntegrityKind::Stale {
                        aoi_ms: now as i64 - rec.ts as i64,
                    },
                });
                continue;
            }
            accepted.push(rec);
        }

        for rec in accepted
            .iter()
            .filter(|r| !r.quality.contains(Quality::IMPUTED))
        {
            let newer = self.last.get(&rec.source).is_none_or(|l| rec.ts > l.ts);
            if newer {
                self.last.insert(rec.source.clone(), rec.clone());
            }
        }

        for ev in &integrity {
            match ev.kind {
                IntegrityKind::Rejected { .. } => self.stats.rejected += 1,
                IntegrityKind::Stale { .. } => self.stats.stale += 1,
                IntegrityKind::SeqRegression { .. } => self.stats.seq_regressions += 1,
                IntegrityKind::UnknownUnit { .. } => self.stats.unknown_units += 1,
            }
            ledger.stage(
                Payload::Provenance(ProvenanceEvent {
                    subject: ev.source.0.clone(),
                    event: ev.kind.label().to_string(),
                    detail: ev.detail(),
                    digest: None,
                    related: vec![],
                }),
                &self.receiver,
                now,
            )?;
        }
        self.stats.accepted += accepted.len() as u64;
        self.stats.imputed += accepted
            .iter()
            .filter(|r| r.quality.contains(Quality::IMPUTED))
            .count() as u64;

        let frame = fuse(now, self.cfg.window_ms, &accepted, aux, &self.cfg.fusion);
        self.prev_end = now;
        Ok(PipelineOutput {
            frame,
            accepted,
            integrity,
            net_events,
        })
    }
}
