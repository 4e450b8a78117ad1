//! Root-cause evidence: a time-ordered timeline around one alert.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;

use super::{Alert, Classification, Evidence};
use crate::ledger::{EntryKind, EntryRef, Ledger};
use crate::twin::SyncFrame;
use crate::types::Ms;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EvidenceItem {
    Ledger {
        ts: Ms,
        at: EntryRef,
        kind: EntryKind,
        author: String,
        summary: String,
    },
    Verdict {
        ts: Ms,
        rule_id: String,
        version: u64,
    },
    Frame {
        ts: Ms,
        summary: String,
    },
}

impl EvidenceItem {
    pub fn ts(&self) -> Ms {
        match self {
            EvidenceItem::Ledger { ts, .. }
            | EvidenceItem::Verdict { ts, .. }
            | EvidenceItem::Frame { ts, .. } => *ts,
        }
    }

    fn rank(&self) -> u8 {
        match self {
            EvidenceItem::Ledger { .. } => 0,
            EvidenceItem::Verdict { .. } => 1,
            EvidenceItem::Frame { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvidenceReport {
    pub alert: Alert,
    pub window_start: Ms,
    pub window_end: Ms,
    /// Channel taps disclosed by the scenario author.
    pub taps: Vec<String>,
    pub items: Vec<EvidenceItem>,
}

impl EvidenceReport {
    /// Structured text with a fixed field order.
    pub fn to_text(&self) -> String {
        let a = &self.alert;
        let mut s = String::new();
        let class = match &a.classification {
            Classification::KnownThreat { rule_id, version } => {
                format!("known_threat rule={rule_id} version={version}")
            }
            Classification::Anomaly { detector, score } => {
                format!("anomaly detector={detector} score={score:.3}")
            }
        };
        let _ = writeln!(
            s,
            "alert {} ts={} severity={} {} subject={} state={}",
            a.alert_id,
            a.ts,
            a.severity.as_str(),
            class,
            a.subject,
            a.state.as_str()
        );
        let _ = writeln!(s, "window {}..{}", self.window_start, self.window_end);
        for t in &self.taps {
            let _ = writeln!(s, "tap {t}");
        }
        for item in &self.items {
            match item {
                EvidenceItem::Ledger {
                    ts,
                    at,
                    kind,
                    author,
                    summary,
                } => {
                    let _ = writeln!(
                        s,
                        "  {ts} ledger block={} entry={} {} author={author} {summary}",
                        at.block,
                        at.entry,
                        kind.as_str()
                    );
                }
                EvidenceItem::Verdict {
                    ts,
                    rule_id,
                    version,
                } => {
                    let _ = writeln!(
                        s,
                        "  {ts} verdict rule={rule_id} version={version} violated"
                    );
                }
                EvidenceItem::Frame { ts, summary } => {
                    let _ = writeln!(s, "  {ts} frame {summary}");
                }
            }
        }
        s
    }
}

fn frame_mentions(f: &SyncFrame, names: &BTreeSet<&str>) -> bool {
    f.observed.values.iter().any(|(q, e)| {
        names.contains(q.as_str()) || e.sources.iter().any(|r| names.contains(r.source.as_str()))
    })
}

fn frame_summary(f: &SyncFrame, names: &BTreeSet<&str>) -> String {
    let mut parts = Vec::new();
    for (q, e) in &f.observed.values {
        let srcs: Vec<&str> = e.sources.iter().map(|r| r.source.as_str()).collect();
        if !names.contains(q.as_str()) && !srcs.iter().any(|s| names.contains(s)) {
            continue;
        }
        let mut p = format!("{q}={:.6}", e.estimate);
        if let Some(pred) = f.predicted.get(q) {
            let _ = write!(p, " predicted={pred:.6}");
        }
        if let Some(r) = f.residual.get(q) {
            let _ = write!(p, " residual={r:.6}");
        }
        let _ = write!(p, " sources=[{}]", srcs.join(","));
        parts.push(p);
    }
    format!("model_version={} {}", f.model_version, parts.join("; "))
}

/// Collects every ledger entry and sync frame that mentions the alert's
/// subject or device within `window_ms` of the alert. Registrations of the
/// subject are included regardless of the window.
pub fn root_cause<'a>(
    alert: &Alert,
    ledger: &Ledger,
    frames: impl IntoIterator<Item = &'a SyncFrame>,
    window_ms: Ms,
    taps: &[String],
) -> EvidenceReport {
    let start = alert.ts.saturating_sub(window_ms);
    let end = alert.ts.saturating_add(window_ms);
    let mut names: BTreeSet<&str> = BTreeSet::from([alert.subject.as_str()]);
    if let Some(d) = &alert.device {
        names.insert(d.as_str());
    }

    let mut items = Vec::new();
    let mut seen = BTreeSet::new();
    for subject in names.iter().copied().chain([alert.alert_id.as_str()]) {
        for p in ledger.query_provenance(subject) {
            let in_window = p.ts >= start && p.ts <= end;
            if (in_window || p.kind == EntryKind::Registration) && seen.insert(p.at) {
                items.push(EvidenceItem::Ledger {
                    ts: p.ts,
                    at: p.at,
                    kind: p.kind,
                    author: p.author.0,
                    summary: p.summary,
                });
            }
        }
    }
    for e in &alert.evidence {
        if let Evidence::Verdict {
            rule_id,
            version,
            ts,
        } = e
        {
            items.push(EvidenceItem::Verdict {
                ts: *ts,
                rule_id: rule_id.clone(),
                version: *version,
            });
        }
    }
    for f in frames {
        if f.ts >= start && f.ts <= end && frame_mentions(f, &names) {
            items.push(EvidenceItem::Frame {
                ts: f.ts,
                summary: frame_summary(f, &names),
            });
        }
    }
    // Stable: frames and verdicts at equal times keep discovery order.
    items.sort_by_key(|i| {
        let at = match i {
            EvidenceItem::Ledger { at, .. } => Some(*at),
            _ => None,
        };
        (i.ts(), i.rank(), at)
    });
    EvidenceReport {
        alert: alert.clone(),
        window_start: start,
        window_end: end,
        taps: taps.to_vec(),
        items,
    }
}
