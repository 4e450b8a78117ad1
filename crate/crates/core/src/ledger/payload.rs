//! Entry bodies and their canonical encoding.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::auth::KeyRef;
use crate::codec::{Canonical, DecodeError, Decoder, Encoder, Hash32};
use crate::rules::{SSRule, Severity};
use crate::types::{Action, EntityId, Ms};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Registration,
    Provenance,
    RuleUpdate,
    ModelUpdate,
    AlertRecord,
}

impl EntryKind {
    pub const ALL: [EntryKind; 5] = [
        EntryKind::Registration,
        EntryKind::Provenance,
        EntryKind::RuleUpdate,
        EntryKind::ModelUpdate,
        EntryKind::AlertRecord,
    ];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.get(t as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EntryKind::Registration => "Registration",
            EntryKind::Provenance => "Provenance",
            EntryKind::RuleUpdate => "RuleUpdate",
            EntryKind::ModelUpdate => "ModelUpdate",
            EntryKind::AlertRecord => "AlertRecord",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Sensor,
    Actuator,
    Machine,
    Human,
    Twin,
    TiService,
}

impl EntityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Sensor => "sensor",
            EntityKind::Actuator => "actuator",
            EntityKind::Machine => "machine",
            EntityKind::Human => "human",
            EntityKind::Twin => "twin",
            EntityKind::TiService => "ti_service",
        }
    }

    fn from_tag(t: u8) -> Result<Self, DecodeError> {
        Ok(match t {
            0 => EntityKind::Sensor,
            1 => EntityKind::Actuator,
            2 => EntityKind::Machine,
            3 => EntityKind::Human,
            4 => EntityKind::Twin,
            5 => EntityKind::TiService,
            _ => return Err(DecodeError::Invalid("entity kind")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub entity_id: EntityId,
    pub kind: EntityKind,
    /// Reference to the key held in the key store, never the key itself.
    pub mac_key: KeyRef,
    pub access: BTreeSet<Action>,
    pub registered_at: Ms,
}

/// Lineage event that is not a registration, rule or model version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEvent {
    pub subject: String,
    pub event: String,
    pub detail: String,
    pub digest: Option<Hash32>,
    /// Further subjects this event should be found under.
    pub related: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelUpdate {
    pub model_id: String,
    pub old_version: u64,
    pub new_version: u64,
    pub old_digest: Hash32,
    pub new_digest: Hash32,
    pub k_hat: f64,
    pub tau_hat: f64,
    pub frames: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertRecordBody {
    pub alert_id: String,
    pub subject: String,
    pub classification: String,
    pub severity: Severity,
    pub state: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Registration(EntityRecord),
    Provenance(ProvenanceEvent),
    RuleUpdate(SSRule),
    ModelUpdate(ModelUpdate),
    AlertRecord(AlertRecordBody),
}

impl Payload {
    pub fn kind(&self) -> EntryKind {
        match self {
            Payload::Registration(_) => EntryKind::Registration,
            Payload::Provenance(_) => EntryKind::Provenance,
            Payload::RuleUpdate(_) => EntryKind::RuleUpdate,
            Payload::ModelUpdate(_) => EntryKind::ModelUpdate,
            Payload::AlertRecord(_) => EntryKind::AlertRecord,
        }
    }

    /// Every id under which this entry appears in provenance queries.
    pub fn subjects(&self) -> Vec<&str> {
        match self {
            Payload::Registration(r) => vec![r.entity_id.as_str()],
            Payload::Provenance(p) => std::iter::once(p.subject.as_str())
                .chain(p.related.iter().map(String::as_str))
                .collect(),
            Payload::RuleUpdate(r) => vec![r.rule_id.as_str()],
            Payload::ModelUpdate(m) => vec![m.model_id.as_str()],
            Payload::AlertRecord(a) => vec![a.alert_id.as_str(), a.subject.as_str()],
        }
    }

    pub fn version(&self) -> Option<u64> {
        match self {
            Payload::RuleUpdate(r) => Some(r.version),
            Payload::ModelUpdate(m) => Some(m.new_version),
            _ => None,
        }
    }

    /// One-line description with a stable field order.
    pub fn summary(&self) -> String {
        match self {
            Payload::Registration(r) => {
                let access: Vec<_> = r.access.iter().map(|a| a.as_str()).collect();
                format!(
                    "register entity={} kind={} key_ref={} access=[{}]",
                    r.entity_id,
                    r.kind.as_str(),
                    r.mac_key,
                    access.join(",")
                )
            }
            Payload::Provenance(p) => {
                let mut s = format!("{} subject={}", p.event, p.subject);
                if !p.detail.is_empty() {
                    s.push(' ');
                    s.push_str(&p.detail);
                }
                if let Some(d) = &p.digest {
                    s.push_str(&format!(" digest={d}"));
                }
                s
            }
            Payload::RuleUpdate(r) => format!(
                "rule={} version={} kind={} severity={} effective_ts={} retired={}",
                r.rule_id,
                r.version,
                r.kind.name(),
                r.severity.as_str(),
                r.effective_ts,
                r.retired
            ),
            Payload::ModelUpdate(m) => format!(
                "model={} version={}->{} k_hat={:.9} tau_hat={:.9} frames={} digest={}->{}",
                m.model_id,
                m.old_version,
                m.new_version,
                m.k_hat,
                m.tau_hat,
                m.frames,
                m.old_digest,
                m.new_digest
            ),
            Payload::AlertRecord(a) => format!(
                "alert={} subject={} class={} severity={} state={} {}",
                a.alert_id,
                a.subject,
                a.classification,
                a.severity.as_str(),
                a.state,
                a.detail
            ),
        }
    }

    pub fn decode(kind: EntryKind, body: &[u8]) -> Result<Self, DecodeError> {
        let mut dec = Decoder::new(body);
        let p = match kind {
            EntryKind::Registration => {
                let entity_id = EntityId(dec.str()?);
                let kind = EntityKind::from_tag(dec.u8()?)?;
                let mac_key = dec.str()?;
                let n = dec.u32()?;
                let mut access = BTreeSet::new();
                for _ in 0..n {
                    access
                        .insert(Action::from_tag(dec.u8()?).ok_or(DecodeError::Invalid("action"))?);
                }
                let registered_at = dec.u64()?;
                Payload::Registration(EntityRecord {
                    entity_id,
                    kind,
                    mac_key,
                    access,
                    registered_at,
                })
            }
            EntryKind::Provenance => {
                let subject = dec.str()?;
                let event = dec.str()?;
                let detail = dec.str()?;
                let digest = if dec.bool()? { Some(dec.hash()?) } else { None };
                let n = dec.u32()?;
                let mut related = Vec::new();
                for _ in 0..n {
                    related.push(dec.str()?);
                }
                Payload::Provenance(ProvenanceEvent {
                    subject,
                    event,
                    detail,
                    digest,
                    related,
                })
            }
            EntryKind::RuleUpdate => Payload::RuleUpdate(SSRule::decode(&mut dec)?),
            EntryKind::ModelUpdate => Payload::ModelUpdate(ModelUpdate {
                model_id: dec.str()?,
                old_version: dec.u64()?,
                new_version: dec.u64()?,
                old_digest: dec.hash()?,
                new_digest: dec.hash()?,
                k_hat: dec.f64()?,
                tau_hat: dec.f64()?,
                frames: dec.u64()?,
            }),
            EntryKind::AlertRecord => {
                let alert_id = dec.str()?;
                let subject = dec.str()?;
                let classification = dec.str()?;
                let severity = match dec.u8()? {
                    0 => Severity::Info,
                    1 => Severity::Warning,
                    2 => Severity::Critical,
                    _ => return Err(DecodeError::Invalid("severity")),
                };
                Payload::AlertRecord(AlertRecordBody {
                    alert_id,
                    subject,
                    classification,
                    severity,
                    state: dec.str()?,
                    detail: dec.str()?,
                })
            }
        };
        dec.finish()?;
        Ok(p)
    }
}

impl Canonical for Payload {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Payload::Registration(r) => {
                enc.str(r.entity_id.as_str())
                    .u8(r.kind as u8)
                    .str(&r.mac_key)
                    .u32(r.access.len() as u32);
                for a in &r.access {
                    enc.u8(a.tag());
                }
                enc.u64(r.registered_at);
            }
            Payload::Provenance(p) => {
                enc.str(&p.subject).str(&p.event).str(&p.detail);
                match &p.digest {
                    Some(d) => enc.bool(true).hash(d),
                    None => enc.bool(false),
                };
                enc.u32(p.related.len() as u32);
                for r in &p.related {
                    enc.str(r);
                }
            }
            Payload::RuleUpdate(r) => r.encode(enc),
            Payload::ModelUpdate(m) => {
                enc.str(&m.model_id)
                    .u64(m.old_version)
                    .u64(m.new_version)
                    .hash(&m.old_digest)
                    .hash(&m.new_digest)
                    .f64(m.k_hat)
                    .f64(m.tau_hat)
                    .u64(m.frames);
            }
            Payload::AlertRecord(a) => {
                enc.str(&a.alert_id)
                    .str(&a.subject)
                    .str(&a.classification)
                    .u8(a.severity as u8)
                    .str(&a.state)
                    .str(&a.detail);
            }
        }
    }
}
