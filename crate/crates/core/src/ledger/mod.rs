//! Append-only, hash-chained ledger of registrations, provenance, rule and
//! model versions, and alerts. Also hosts the entity registry, which is
//! derived entirely from committed and staged registrations.

mod file;
mod payload;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::codec::{Canonical, DecodeError, Encoder, Hash32};
use crate::rules::{validate_rule, Malformed, SSRule};
use crate::types::{Action, Authorizer, EntityId, Ms};

pub use file::{dump, export, import, verify_bytes, LEDGER_MAGIC};
pub use payload::{
    AlertRecordBody, EntityKind, EntityRecord, EntryKind, ModelUpdate, Payload, ProvenanceEvent,
};

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("entity `{0}` is already registered")]
    DuplicateEntity(EntityId),
    #[error("author `{0}` is not registered")]
    UnregisteredAuthor(EntityId),
    #[error("`{author}` lacks the `{}` permission", action.as_str())]
    Unauthorized { author: EntityId, action: Action },
    #[error("refusing to commit an empty block")]
    EmptyBlock,
    #[error("rule `{0}` is a draft and needs approval")]
    DraftRule(String),
    #[error("rule `{rule_id}` is malformed: {reason}")]
    MalformedRule { rule_id: String, reason: Malformed },
    #[error("rule `{rule_id}` version {version} does not follow version {latest}")]
    StaleVersion {
        rule_id: String,
        version: u64,
        latest: u64,
    },
    #[error("entry body does not decode: {0}")]
    Decode(#[from] DecodeError),
    #[error("chain broken at block {index}")]
    Broken { index: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LedgerEntry {
    pub kind: EntryKind,
    pub author: EntityId,
    pub ts: Ms,
    pub body: Vec<u8>,
    pub body_hash: Hash32,
}

impl LedgerEntry {
    pub fn new(payload: &Payload, author: &EntityId, ts: Ms) -> Self {
        let body = payload.to_canonical();
        Self {
            kind: payload.kind(),
            author: author.clone(),
            ts,
            body_hash: Hash32::of(&body),
            body,
        }
    }

    pub fn payload(&self) -> Result<Payload, DecodeError> {
        Payload::decode(self.kind, &self.body)
    }

    /// Hash over kind, author, ts and the body hash.
    pub fn hash(&self) -> Hash32 {
        let mut enc = Encoder::new();
        enc.u8(self.kind.tag())
            .str(self.author.as_str())
            .u64(self.ts)
            .hash(&self.body_hash);
        Hash32::of(&enc.finish())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LedgerBlock {
    pub index: u64,
    pub prev_hash: Hash32,
    pub ts: Ms,
    pub entries: Vec<LedgerEntry>,
    pub block_hash: Hash32,
}

impl LedgerBlock {
    pub fn compute_hash(&self) -> Hash32 {
        let mut enc = Encoder::new();
        enc.u64(self.index)
            .hash(&self.prev_hash)
            .u64(self.ts)
            .u32(self.entries.len() as u32);
        for e in &self.entries {
            enc.hash(&e.hash());
        }
        Hash32::of(&enc.finish())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ChainStatus {
    Valid,
    Broken { index: u64 },
}

impl ChainStatus {
    pub fn is_valid(self) -> bool {
        self == ChainStatus::Valid
    }
}

/// Checks indices, back-links, body hashes, body decoding, block hashes and
/// timestamp order. Reports the first block that fails.
pub fn verify_blocks(blocks: &[LedgerBlock]) -> ChainStatus {
    let mut prev = Hash32::ZERO;
    let mut prev_ts = 0;
    for (i, b) in blocks.iter().enumerate() {
        let broken = ChainStatus::Broken { index: i as u64 };
        if b.index != i as u64 || b.prev_hash != prev || b.ts < prev_ts {
            return broken;
        }
        for e in &b.entries {
            if Hash32::of(&e.body) != e.body_hash || e.payload().is_err() {
                return broken;
            }
        }
        if b.compute_hash() != b.block_hash {
            return broken;
        }
        prev = b.block_hash;
        prev_ts = b.ts;
    }
    ChainStatus::Valid
}

/// Registered entities, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    entities: BTreeMap<EntityId, EntityRecord>,
}

impl Registry {
    pub fn get(&self, id: &EntityId) -> Option<&EntityRecord> {
        self.entities.get(id)
    }

    pub fn contains(&self, id: &EntityId) -> bool {
        self.entities.contains_key(id)
    }

    pub fn insert(&mut self, rec: EntityRecord) {
        self.entities.insert(rec.entity_id.clone(), rec);
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &EntityRecord> {
        self.entities.values()
    }
}

impl Authorizer for Registry {
    fn permits(&self, entity: &EntityId, action: Action) -> bool {
        self.get(entity).is_some_and(|e| e.access.contains(&action))
    }
}

/// Position of a committed entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct EntryRef {
    pub block: u64,
    pub entry: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProvenanceItem {
    #[serde(flatten)]
    pub at: EntryRef,
    pub ts: Ms,
    pub kind: EntryKind,
    pub author: EntityId,
    pub version: Option<u64>,
    pub summary: String,
    /// Previous entry about the same subject.
    pub prior: Option<EntryRef>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LedgerStats {
    pub blocks: u64,
    pub entries: u64,
    pub pending: u64,
    pub by_kind: BTreeMap<EntryKind, u64>,
}

/// State touched by validation; cloned for atomic multi-entry appends.
#[derive(Debug, Clone, Default)]
struct State {
    registry: Registry,
    rule_versions: BTreeMap<String, u64>,
}

impl State {
    fn check_permission(&self, author: &EntityId, action: Action) -> Result<(), LedgerError> {
        let rec = self
            .registry
            .get(author)
            .ok_or_else(|| LedgerError::UnregisteredAuthor(author.clone()))?;
        if rec.access.contains(&action) {
            Ok(())
        } else {
            Err(LedgerError::Unauthorized {
                author: author.clone(),
                action,
            })
        }
    }

    fn apply(&mut self, payload: &Payload, author: &EntityId) -> Result<(), LedgerError> {
        match payload {
            Payload::Registration(rec) => {
                let bootstrap = self.registry.is_empty() && rec.entity_id == *author;
                if !bootstrap {
                    self.check_permission(author, Action::UpdateRule)?;
                }
                if self.registry.contains(&rec.entity_id) {
                    return Err(LedgerError::DuplicateEntity(rec.entity_id.clone()));
                }
                self.registry.insert(rec.clone());
            }
            Payload::RuleUpdate(rule) => {
                self.check_permission(author, Action::UpdateRule)?;
                if rule.draft {
                    return Err(LedgerError::DraftRule(rule.rule_id.clone()));
                }
                validate_rule(rule).map_err(|reason| LedgerError::MalformedRule {
                    rule_id: rule.rule_id.clone(),
                    reason,
                })?;
                let latest = self.rule_versions.get(&rule.rule_id).copied().unwrap_or(0);
                if rule.version <= latest {
                    return Err(LedgerError::StaleVersion {
                        rule_id: rule.rule_id.clone(),
                        version: rule.version,
                        latest,
                    });
                }
                self.rule_versions
                    .insert(rule.rule_id.clone(), rule.version);
            }
            Payload::ModelUpdate(_) => self.check_permission(author, Action::CalibrateModel)?,
            Payload::Provenance(_) | Payload::AlertRecord(_) => {
                if !self.registry.contains(author) {
                    return Err(LedgerError::UnregisteredAuthor(author.clone()));
                }
            }
        }
        Ok(())
    }

    /// Applies effects without authority checks; used when loading a
    /// chain that has already been verified.
    fn replay(&mut self, payload: &Payload) {
        match payload {
            Payload::Registration(rec) => self.registry.insert(rec.clone()),
            Payload::RuleUpdate(rule) => {
                let v = self.rule_versions.entry(rule.rule_id.clone()).or_default();
                *v = (*v).max(rule.version);
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Ledger {
    blocks: Vec<LedgerBlock>,
    pending: Vec<(LedgerEntry, Payload)>,
    state: State,
    subjects: BTreeMap<String, Vec<EntryRef>>,
    rules: BTreeMap<String, Vec<SSRule>>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn registry(&self) -> &Registry {
        &self.state.registry
    }

    pub fn blocks(&self) -> &[LedgerBlock] {
        &self.blocks
    }

    pub fn pending(&self) -> impl Iterator<Item = &LedgerEntry> {
        self.pending.iter().map(|(e, _)| e)
    }

    pub fn head_hash(&self) -> Hash32 {
        self.blocks.last().map_or(Hash32::ZERO, |b| b.block_hash)
    }

    /// Validates `payload` and queues it for the next block. Registrations
    /// take effect in the registry immediately.
    pub fn stage(
        &mut self,
        payload: Payload,
        author: &EntityId,
        ts: Ms,
    ) -> Result<EntryRef, LedgerError> {
        self.state.apply(&payload, author)?;
        let at = EntryRef {
            block: self.blocks.len() as u64,
            entry: self.pending.len() as u32,
        };
        self.pending
            .push((LedgerEntry::new(&payload, author, ts), payload));
        Ok(at)
    }

    pub fn register_entity(
        &mut self,
        rec: EntityRecord,
        author: &EntityId,
        ts: Ms,
    ) -> Result<EntryRef, LedgerError> {
        self.stage(Payload::Registration(rec), author, ts)
    }

    /// Commits staged entries as one block; `None` if nothing is staged.
    pub fn seal(&mut self, ts: Ms) -> Option<&LedgerBlock> {
        if self.pending.is_empty() {
            return None;
        }
        let pending = std::mem::take(&mut self.pending);
        let ts = ts.max(self.blocks.last().map_or(0, |b| b.ts));
        let (entries, payloads): (Vec<_>, Vec<_>) = pending.into_iter().unzip();
        self.commit(entries, payloads, ts);
        self.blocks.last()
    }

    /// Validates all entries against the current state and commits them as
    /// a single block, or changes nothing.
    pub fn append(
        &mut self,
        entries: Vec<LedgerEntry>,
        ts: Ms,
    ) -> Result<&LedgerBlock, LedgerError> {
        if entries.is_empty() {
            return Err(LedgerError::EmptyBlock);
        }
        let mut state = self.state.clone();
        let mut payloads = Vec::with_capacity(entries.len());
        for e in &entries {
            if Hash32::of(&e.body) != e.body_hash {
                return Err(LedgerError::Decode(DecodeError::Invalid("body hash")));
            }
            let p = e.payload()?;
            state.apply(&p, &e.author)?;
            payloads.push(p);
        }
        // Staged entries were validated against the live state, so keep them
        // ahead of this block by sealing first.
        if !self.pending.is_empty() {
            let pending_ts = self.pending.last().map_or(ts, |(e, _)| e.ts).min(ts);
            self.seal(pending_ts);
        }
        self.state = state;
        let ts = ts.max(self.blocks.last().map_or(0, |b| b.ts));
        self.commit(entries, payloads, ts);
        Ok(self.blocks.last().expect("just committed"))
    }

    fn commit(&mut self, entries: Vec<LedgerEntry>, payloads: Vec<Payload>, ts: Ms) {
        let index = self.blocks.len() as u64;
        for (j, p) in payloads.iter().enumerate() {
            self.index_payload(
                p,
                EntryRef {
                    block: index,
                    entry: j as u32,
                },
            );
        }
        let mut block = LedgerBlock {
            index,
            prev_hash: self.head_hash(),
            ts,
            entries,
            block_hash: Hash32::ZERO,
        };
        block.block_hash = block.compute_hash();
        self.blocks.push(block);
    }

    fn index_payload(&mut self, p: &Payload, at: EntryRef) {
        let mut seen = BTreeSet::new();
        for s in p.subjects() {
            if seen.insert(s) {
                self.subjects.entry(s.to_string()).or_default().push(at);
            }
        }
        if let Payload::RuleUpdate(r) = p {
            self.rules
                .entry(r.rule_id.clone())
                .or_default()
                .push(r.clone());
        }
    }

    /// Rebuilds a ledger from blocks that pass [`verify_blocks`].
    pub fn from_blocks(blocks: Vec<LedgerBlock>) -> Result<Self, LedgerError> {
        if let ChainStatus::Broken { index } = verify_blocks(&blocks) {
            return Err(LedgerError::Broken { index });
        }
        let mut ledger = Ledger::new();
        for b in &blocks {
            for (j, e) in b.entries.iter().enumerate() {
                let p = e.payload()?;
                ledger.state.replay(&p);
                ledger.index_payload(
                    &p,
                    EntryRef {
                        block: b.index,
                        entry: j as u32,
                    },
                );
            }
        }
        ledger.blocks = blocks;
        Ok(ledger)
    }

    pub fn verify_chain(&self) -> ChainStatus {
        verify_blocks(&self.blocks)
    }

    pub fn entry(&self, at: EntryRef) -> Option<&LedgerEntry> {
        self.blocks
            .get(at.block as usize)?
            .entries
            .get(at.entry as usize)
    }

    /// Committed entries mentioning `subject`, oldest first, each linked to
    /// its predecessor.
    pub fn query_provenance(&self, subject: &str) -> Vec<ProvenanceItem> {
        let Some(refs) = self.subjects.get(subject) else {
            return Vec::new();
        };
        let mut prior = None;
        refs.iter()
            .filter_map(|at| {
                let e = self.entry(*at)?;
                let p = e.payload().ok()?;
                let item = ProvenanceItem {
                    at: *at,
                    ts: e.ts,
                    kind: e.kind,
                    author: e.author.clone(),
                    version: p.version(),
                    summary: p.summary(),
                    prior,
                };
                prior = Some(*at);
                Some(item)
            })
            .collect()
    }

    /// For each rule id, the highest committed version with
    /// `effective_ts <= at`, unless that version retires the rule.
    pub fn active_rules(&self, at: Ms) -> Vec<SSRule> {
        self.rules
            .values()
            .filter_map(|versions| {
                versions
                    .iter()
                    .filter(|r| r.effective_ts <= at)
                    .max_by_key(|r| r.version)
            })
            .filter(|r| !r.retired)
            .cloned()
            .collect()
    }

    /// Every committed version of `rule_id`, in commit order.
    pub fn rule_history(&self, rule_id: &str) -> &[SSRule] {
        self.rules.get(rule_id).map_or(&[], Vec::as_slice)
    }

    pub fn stats(&self) -> LedgerStats {
        let mut s = LedgerStats {
            blocks: self.blocks.len() as u64,
            pending: self.pending.len() as u64,
            ..Default::default()
        };
        for k in EntryKind::ALL {
            s.by_kind.insert(k, 0);
        }
        for e in self.blocks.iter().flat_map(|b| &b.entries) {
            s.entries += 1;
            *s.by_kind.entry(e.kind).or_default() += 1;
        }
        s
    }

    /// Committed entries with decoded payloads, in chain order.
    pub fn entries(&self) -> impl Iterator<Item = (EntryRef, &LedgerEntry)> {
        self.blocks.iter().flat_map(|b| {
            b.entries.iter().enumerate().map(move |(j, e)| {
                (
                    EntryRef {
                        block: b.index,
                        entry: j as u32,
                    },
                    e,
                )
            })
        })
    }
}
