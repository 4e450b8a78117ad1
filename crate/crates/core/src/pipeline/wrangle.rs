//! Cleaning and normalization of raw telemetry into [`UnifiedRecord`]s.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::knowledge::EngineeringKnowledge;
use super::{Origin, Quality, UnifiedRecord};
use crate::plant::TelemetrySample;
use crate::types::{to_canonical_unit, EntityId, Ms, Quantity};

/// What the wrangler expects from a registered source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Expectation {
    pub quantity: Quantity,
    pub period_ms: Ms,
}

/// State and configuration for one wrangling window `(start, end]`.
#[derive(Debug, Clone, Default)]
pub struct WrangleContext {
    pub window_start: Ms,
    pub window_end: Ms,
    /// Receive time used for age of information.
    pub now: Ms,
    pub expected: BTreeMap<EntityId, Expectation>,
    /// Last accepted record per source from earlier windows.
    pub last: BTreeMap<EntityId, UnifiedRecord>,
    pub knowledge: EngineeringKnowledge,
    /// Imputation stops once a source's last real sample is older than
    /// this; unbounded when absent.
    pub max_gap_ms: Option<Ms>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnknownUnit {
    pub source: EntityId,
    pub unit: String,
    pub ts: Ms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqRegression {
    pub source: EntityId,
    pub seq: u64,
    pub last_seq: u64,
    pub ts: Ms,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WrangleOutput {
    pub records: Vec<UnifiedRecord>,
    pub unknown_units: Vec<UnknownUnit>,
    pub duplicates: usize,
    pub seq_regressions: Vec<SeqRegression>,
}

/// Converts one sample to SI. `None` when its unit is unknown.
pub fn normalize(sample: &TelemetrySample, now: Ms) -> Option<UnifiedRecord> {
    let value_si = to_canonical_unit(sample.quantity, &sample.unit, sample.value)?;
    let mut quality = Quality::empty();
    if sample.unit != sample.quantity.canonical_unit() {
        quality |= Quality::UNIT_CONVERTED;
    }
    Some(UnifiedRecord {
        source: sample.source.clone(),
        quantity: sample.quantity,
        value_si,
        ts: sample.ts,
        seq: sample.seq,
        quality,
        aoi: now as i64 - sample.ts as i64,
        origin: Some(Origin {
            value: sample.value,
            auth_tag: sample.auth_tag,
        }),
    })
}

/// Normalizes units and then [`clean`]s.
pub fn wrangle(raw: &[TelemetrySample], ctx: &WrangleContext) -> WrangleOutput {
    let mut unknown_units = Vec::new();
    let records: Vec<UnifiedRecord> = raw
        .iter()
        .filter_map(|s| {
            let r = normalize(s, ctx.now);
            if r.is_none() {
                unknown_units.push(UnknownUnit {
                    source: s.source.clone(),
                    unit: s.unit.clone(),
                    ts: s.ts,
                });
            }
            r
        })
        .collect();
    let mut out = clean(&records, ctx);
    out.unknown_units = unknown_units;
    out
}

/// Deduplicates, orders, flags and imputes already-unified records.
///
/// Idempotent: `clean(clean(x).records) == clean(x).records`.
pub fn clean(records: &[UnifiedRecord], ctx: &WrangleContext) -> WrangleOutput {
    let mut duplicates = 0usize;

    // First occurrence wins. Imputed records are keyed by time, not seq.
    let mut seen_seq: BTreeMap<(EntityId, u64), usize> = BTreeMap::new();
    let mut seen_imputed: BTreeSet<(EntityId, Ms)> = BTreeSet::new();
    let mut kept: Vec<UnifiedRecord> = Vec::with_capacity(records.len());
    for r in records {
        if r.quality.contains(Quality::IMPUTED) {
            if !seen_imputed.insert((r.source.clone(), r.ts)) {
                duplicates += 1;
                continue;
            }
            kept.push(r.clone());
            continue;
        }
        match seen_seq.get(&(r.source.clone(), r.seq)) {
            Some(&i) => {
                kept[i].quality |= Quality::DEDUPLICATED;
                duplicates += 1;
            }
            None => {
                seen_seq.insert((r.source.clone(), r.seq), kept.len());
                kept.push(r.clone());
            }
        }
    }

    // Per source, strictly increasing ts: later records at an equal ts are
    // duplicates of the first.
    kept.sort_by(|a, b| (&a.source, a.ts).cmp(&(&b.source, b.ts)));
    let mut ordered: Vec<UnifiedRecord> = Vec::with_capacity(kept.len());
    for r in kept {
        match ordered.last_mut() {
            Some(prev) if prev.source == r.source && prev.ts == r.ts => {
                prev.quality |= Quality::DEDUPLICATED;
                duplicates += 1;
            }
            _ => ordered.push(r),
        }
    }

    let mut seq_regressions = Vec::new();
    for r in &ordered {
        if r.quality.contains(Quality::IMPUTED) {
            continue;
        }
        if let Some(last) = ctx.last.get(&r.source) {
            if r.seq <= last.seq {
                seq_regressions.push(SeqRegression {
                    source: r.source.clone(),
                    seq: r.seq,
                    last_seq: last.seq,
                    ts: r.ts,
                });
            }
        }
    }

    let mut imputed = Vec::new();
    for (source, exp) in &ctx.expected {
        if exp.period_ms == 0 {
            continue;
        }
        let floor = ctx.last.get(source).map(|l| l.ts);
        let mine: Vec<&UnifiedRecord> = ordered.iter().filter(|r| r.source == *source).collect();
        let mut carry: Option<UnifiedRecord> = ctx.last.get(source).cloned();
        // Timestamp of the real sample the carried value came from.
        let mut origin: Option<Ms> = carry.as_ref().map(|c| c.ts);
        let mut cursor = 0;
        let first = (ctx.window_start / exp.period_ms + 1) * exp.period_ms;
        let mut t = first;
        while t <= ctx.window_end {
            // Advance the carry over non-regressing records before t.
            while cursor < mine.len() && mine[cursor].ts < t {
                if floor.is_none_or(|f| mine[cursor].ts > f) {
                    if !mine[cursor].quality.contains(Quality::IMPUTED) {
                        origin = Some(mine[cursor].ts);
                    }
                    carry = Some(mine[cursor].clone());
                }
                cursor += 1;
            }
            let present = mine.iter().any(|r| r.ts == t);
            let fresh = match (origin, ctx.max_gap_ms) {
                (Some(o), Some(gap)) => t.saturating_sub(o) <= gap,
                _ => true,
            };
            if !present && fresh {
                if let Some(prev) = &carry {
                    let rec = UnifiedRecord {
                        source: source.clone(),
                        quantity: exp.quantity,
                        value_si: prev.value_si,
                        ts: t,
                        seq: prev.seq,
                        quality: (prev.quality & Quality::UNIT_CONVERTED) | Quality::IMPUTED,
                        aoi: ctx.now as i64 - t as i64,
                        origin: None,
                    };
                    carry = Some(rec.clone());
                    imputed.push(rec);
                }
            } else if let Some(r) = mine.iter().find(|r| r.ts == t) {
                if floor.is_none_or(|f| r.ts > f) {
                    if !r.quality.contains(Quality::IMPUTED) {
                        origin = Some(r.ts);
                    }
                    carry = Some((*r).clone());
                }
            }
            t += exp.period_ms;
        }
    }
    ordered.extend(imputed);

    for r in &mut ordered {
        if let Some(b) = ctx.knowledge.bound_for(&r.source, r.quantity) {
            if !b.contains(r.value_si) {
                r.quality |= Quality::OUT_OF_RANGE;
            }
        }
    }
    ordered.sort_by(|a, b| (&a.source, a.ts).cmp(&(&b.source, b.ts)));

    WrangleOutput {
        records: ordered,
        unknown_units: Vec::new(),
        duplicates,
        seq_regressions,
    }
}
