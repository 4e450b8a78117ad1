//! Safety & security rules: model, structural validation, evaluation
//! against fused frames, and threshold proposals from benign history.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::pipeline::{FusedFrame, NetEvent, RecordRef};
use crate::types::{Action, EntityId, Ms};

/// Smallest allowed width of a proposed threshold band.
pub const MIN_BAND: f64 = 1e-6;

/// Frames required before a threshold can be proposed.
pub const MIN_PROPOSAL_FRAMES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleLevel {
    Device,
    Network,
    Process,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Warning,
    Critical,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Info => "info",
            Severity::Warning => "warning",
            Severity::Critical => "critical",
        }
    }

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Result<Self, DecodeError> {
        match t {
            0 => Ok(Severity::Info),
            1 => Ok(Severity::Warning),
            2 => Ok(Severity::Critical),
            _ => Err(DecodeError::Invalid("severity")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendLimit {
    /// Units per second, absolute value of the least-squares slope.
    MaxSlope(f64),
    /// Population variance over the window.
    MaxVariance(f64),
}

fn neg_inf() -> f64 {
    f64::NEG_INFINITY
}
fn pos_inf() -> f64 {
    f64::INFINITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Threshold {
        quantity: String,
        #[serde(default = "neg_inf")]
        min: f64,
        #[serde(default = "pos_inf")]
        max: f64,
    },
    /// `quantity_a ≈ gain * quantity_b + offset`.
    Consistency {
        quantity_a: String,
        quantity_b: String,
        gain: f64,
        #[serde(default)]
        offset: f64,
        tolerance: f64,
    },
    Trend {
        quantity: String,
        window_ms: Ms,
        limit: TrendLimit,
    },
    Whitelist {
        allowed: Vec<(EntityId, EntityId)>,
    },
    AccessControl {
        entity: EntityId,
        permitted: BTreeSet<Action>,
    },
}

impl RuleKind {
    pub fn name(&self) -> &'static str {
        match self {
            RuleKind::Threshold { .. } => "threshold",
            RuleKind::Consistency { .. } => "consistency",
            RuleKind::Trend { .. } => "trend",
            RuleKind::Whitelist { .. } => "whitelist",
            RuleKind::AccessControl { .. } => "access_control",
        }
    }
}

fn default_version() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SSRule {
    pub rule_id: String,
    #[serde(default = "default_version")]
    pub version: u64,
    pub level: RuleLevel,
    pub kind: RuleKind,
    #[serde(default)]
    pub target: String,
    pub severity: Severity,
    pub author: EntityId,
    #[serde(default)]
    pub effective_ts: Ms,
    #[serde(default)]
    pub retired: bool,
    /// Drafts need operator approval before they may be committed.
    #[serde(default)]
    pub draft: bool,
}

impl Canonical for SSRule {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(&self.rule_id).u64(self.version);
        enc.u8(match self.level {
            RuleLevel::Device => 0,
            RuleLevel::Network => 1,
            RuleLevel::Process => 2,
        });
        match &self.kind {
            RuleKind::Threshold { quantity, min, max } => {
                enc.u8(0).str(quantity).f64(*min).f64(*max);
            }
            RuleKind::Consistency {
                quantity_a,
                quantity_b,
                gain,
                offset,
                tolerance,
            } => {
                enc.u8(1)
                    .str(quantity_a)
                    .str(quantity_b)
                    .f64(*gain)
                    .f64(*offset)
                    .f64(*tolerance);
            }
            RuleKind::Trend {
                quantity,
                window_ms,
                limit,
            } => {
                enc.u8(2).str(quantity).u64(*window_ms);
                match limit {
                    TrendLimit::MaxSlope(v) => enc.u8(0).f64(*v),
                    TrendLimit::MaxVariance(v) => enc.u8(1).f64(*v),
                };
            }
            RuleKind::Whitelist { allowed } => {
                enc.u8(3).u32(allowed.len() as u32);
                for (s, r) in allowed {
                    enc.str(s.as_str()).str(r.as_str());
                }
            }
            RuleKind::AccessControl { entity, permitted } => {
                enc.u8(4).str(entity.as_str()).u32(permitted.len() as u32);
                for a in permitted {
                    enc.u8(a.tag());
                }
            }
        }
        enc.str(&self.target)
            .u8(self.severity.tag())
            .str(self.author.as_str())
            .u64(self.effective_ts)
            .bool(self.retired)
            .bool(self.draft);
    }
}

impl SSRule {
    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let rule_id = dec.str()?;
        let version = dec.u64()?;
        let level = match dec.u8()? {
            0 => RuleLevel::Device,
            1 => RuleLevel::Network,
            2 => RuleLevel::Process,
            _ => return Err(DecodeError::Invalid("rule level")),
        };
        let kind = match dec.u8()? {
            0 => RuleKind::Threshold {
                quantity: dec.str()?,
                min: dec.f64()?,
                max: dec.f64()?,
            },
            1 => RuleKind::Consistency {
                quantity_a: dec.str()?,
                quantity_b: dec.str()?,
                gain: dec.f64()?,
                offset: dec.f64()?,
                tolerance: dec.f64()?,
            },
            2 => {
                let quantity = dec.str()?;
                let window_ms = dec.u64()?;
                let limit = match dec.u8()? {
                    0 => TrendLimit::MaxSlope(dec.f64()?),
                    1 => TrendLimit::MaxVariance(dec.f64()?),
                    _ => return Err(DecodeError::Invalid("trend limit")),
                };
                RuleKind::Trend {
                    quantity,
                    window_ms,
                    limit,
                }
            }
            3 => {
                let n = dec.u32()?;
                let mut allowed = Vec::new();
                for _ in 0..n {
                    allowed.push((EntityId(dec.str()?), EntityId(dec.str()?)));
                }
                RuleKind::Whitelist { allowed }
            }
            4 => {
                let entity = EntityId(dec.str()?);
                let n = dec.u32()?;
                let mut permitted = BTreeSet::new();
                for _ in 0..n {
                    permitted
                        .insert(Action::from_tag(dec.u8()?).ok_or(DecodeError::Invalid("action"))?);
                }
                RuleKind::AccessControl { entity, permitted }
            }
            _ => return Err(DecodeError::Invalid("rule kind")),
        };
        Ok(SSRule {
            rule_id,
            version,
            level,
            kind,
            target: dec.str()?,
            severity: Severity::from_tag(dec.u8()?)?,
            author: EntityId(dec.str()?),
            effective_ts: dec.u64()?,
            retired: dec.bool()?,
            draft: dec.bool()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Malformed {
    #[error("rule id is empty")]
    EmptyId,
    #[error("version must be >= 1")]
    ZeroVersion,
    #[error("threshold needs min < max (got {min} .. {max})")]
    EmptyBand { min: f64, max: f64 },
    #[error("trend window must be > 0")]
    ZeroWindow,
    #[error("{0} must be finite and >= 0")]
    BadTolerance(&'static str),
    #[error("{0} must not be empty")]
    EmptyField(&'static str),
}

/// Structural checks applied before a rule may reach the ledger.
pub fn validate_rule(rule: &SSRule) -> Result<(), Malformed> {
    if rule.rule_id.is_empty() {
        return Err(Malformed::EmptyId);
    }
    if rule.version == 0 {
        return Err(Malformed::ZeroVersion);
    }
    match &rule.kind {
        RuleKind::Threshold { quantity, min, max } => {
            if quantity.is_empty() {
                return Err(Malformed::EmptyField("quantity"));
            }
            if !(min < max) {
                return Err(Malformed::EmptyBand {
                    min: *min,
                    max: *max,
                });
            }
        }
        RuleKind::Consistency {
            quantity_a,
            quantity_b,
            gain,
            offset,
            tolerance,
        } => {
            if quantity_a.is_empty() || quantity_b.is_empty() {
                return Err(Malformed::EmptyField("quantity"));
            }
            if !gain.is_finite() || !offset.is_finite() {
                return Err(Malformed::BadTolerance("gain/offset"));
            }
            if !(tolerance.is_finite() && *tolerance >= 0.0) {
                return Err(Malformed::BadTolerance("tolerance"));
            }
        }
        RuleKind::Trend {
            quantity,
            window_ms,
            limit,
        } => {
            if quantity.is_empty() {
                return Err(Malformed::EmptyField("quantity"));
            }
            if *window_ms == 0 {
                return Err(Malformed::ZeroWindow);
            }
            let v = match limit {
                TrendLimit::MaxSlope(v) | TrendLimit::MaxVariance(v) => *v,
            };
            if !(v >= 0.0) {
                return Err(Malformed::BadTolerance("trend limit"));
            }
        }
        RuleKind::Whitelist { .. } => {}
        RuleKind::AccessControl { entity, .. } => {
            if entity.as_str().is_empty() {
                return Err(Malformed::EmptyField("entity"));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum Outcome {
    Pass,
    Violation {
        observed: f64,
        bound: f64,
        margin: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleVerdict {
    pub rule_id: String,
    pub version: u64,
    /// What the rule protects; the rule id when the rule names no target.
    pub target: String,
    pub severity: Severity,
    pub ts: Ms,
    #[serde(flatten)]
    pub outcome: Outcome,
    pub evidence: Vec<RecordRef>,
    /// Frame timestamps from history that contributed (trend rules).
    pub history_ts: Vec<Ms>,
    pub note: Option<String>,
}

impl RuleVerdict {
    pub fn is_violation(&self) -> bool {
        matches!(self.outcome, Outcome::Violation { .. })
    }

    fn new(rule: &SSRule, ts: Ms, outcome: Outcome) -> Self {
        Self {
            rule_id: rule.rule_id.clone(),
            version: rule.version,
            target: if rule.target.is_empty() {
                rule.rule_id.clone()
            } else {
                rule.target.clone()
            },
            severity: rule.severity,
            ts,
            outcome,
            evidence: Vec::new(),
            history_ts: Vec::new(),
            note: None,
        }
    }

    fn not_observable(rule: &SSRule, ts: Ms, what: &str) -> Self {
        let mut v = Self::new(rule, ts, Outcome::Pass);
        v.note = Some(format!("not observable: {what}"));
        v
    }
}

/// Looks up a value by name, treating twin inputs (e.g. duty) as observable.
fn observe(frame: &FusedFrame, name: &str) -> Option<(f64, Vec<RecordRef>)> {
    if let Some(e) = frame.values.get(name) {
        return Some((e.estimate, e.sources.clone()));
    }
    frame.twin_inputs.get(name).map(|v| (*v, Vec::new()))
}

/// Evaluates every applicable rule. Pure: identical inputs give identical
/// verdicts. Access-control rules are consulted by [`check_access`] at
/// command issuance and produce no frame verdict.
pub fn evaluate(
    rules: &[SSRule],
    frame: &FusedFrame,
    net_events: &[NetEvent],
    history: &[FusedFrame],
) -> Vec<RuleVerdict> {
    let mut out = Vec::new();
    for rule in rules {
        if rule.retired || rule.draft {
            continue;
        }
        let ts = frame.ts;
        let verdict = match &rule.kind {
            RuleKind::Threshold { quantity, min, max } => match observe(frame, quantity) {
                None => RuleVerdict::not_observable(rule, ts, quantity),
                Some((v, refs)) => {
                    let outcome = if v > *max {
                        Outcome::Violation {
                            observed: v,
                            bound: *max,
                            margin: v - max,
                        }
                    } else if v < *min {
                        Outcome::Violation {
                            observed: v,
                            bound: *min,
                            margin: min - v,
                        }
                    } else {
                        Outcome::Pass
                    };
                    let mut verdict = RuleVerdict::new(rule, ts, outcome);
                    verdict.evidence = refs;
                    verdict
                }
            },
            RuleKind::Consistency {
                quantity_a,
                quantity_b,
                gain,
                offset,
                tolerance,
            } => match (observe(frame, quantity_a), observe(frame, quantity_b)) {
                (Some((a, ra)), Some((b, rb))) => {
                    let expected = gain * b + offset;
                    let dev = (a - expected).abs();
                    let outcome = if dev <= *tolerance {
                        Outcome::Pass
                    } else {
                        Outcome::Violation {
                            observed: dev,
                            bound: *tolerance,
                            margin: dev - tolerance,
                        }
                    };
                    let mut verdict = RuleVerdict::new(rule, ts, outcome);
                    verdict.evidence = ra.into_iter().chain(rb).collect();
                    verdict
                }
                (None, _) => RuleVerdict::not_observable(rule, ts, quantity_a),
                (_, None) => RuleVerdict::not_observable(rule, ts, quantity_b),
            },
            RuleKind::Trend {
                quantity,
                window_ms,
                limit,
            } => evaluate_trend(rule, frame, history, quantity, *window_ms, *limit),
            RuleKind::Whitelist { allowed } => {
                let offending: Vec<&NetEvent> = net_events
                    .iter()
                    .filter(|e| {
                        !allowed
                            .iter()
                            .any(|(s, r)| *s == e.sender && *r == e.receiver)
                    })
                    .collect();
                let outcome = if offending.is_empty() {
                    Outcome::Pass
                } else {
                    Outcome::Violation {
                        observed: offending.len() as f64,
                        bound: 0.0,
                        margin: offending.len() as f64,
                    }
                };
                let mut verdict = RuleVerdict::new(rule, ts, outcome);
                if !offending.is_empty() {
                    let mut pairs: Vec<String> = offending
                        .iter()
                        .map(|e| format!("{}->{}", e.sender, e.receiver))
                        .collect();
                    pairs.dedup();
                    verdict.note = Some(format!("unknown links: {}", pairs.join(",")));
                }
                verdict
            }
            RuleKind::AccessControl { .. } => continue,
        };
        out.push(verdict);
    }
    out
}

fn evaluate_trend(
    rule: &SSRule,
    frame: &FusedFrame,
    history: &[FusedFrame],
    quantity: &str,
    window_ms: Ms,
    limit: TrendLimit,
) -> RuleVerdict {
    let start = frame.ts.saturating_sub(window_ms);
    let mut points: Vec<(Ms, f64)> = history
        .iter()
        .filter(|f| f.ts > start && f.ts < frame.ts)
        .filter_map(|f| f.value(quantity).map(|v| (f.ts, v)))
        .collect();
    let Some(current) = frame.value(quantity) else {
        return RuleVerdict::not_observable(rule, frame.ts, quantity);
    };
    points.push((frame.ts, current));
    if points.len() < 2 {
        let mut v = RuleVerdict::new(rule, frame.ts, Outcome::Pass);
        v.note = Some("insufficient history".into());
        return v;
    }
    let n = points.len() as f64;
    let mean_v = points.iter().map(|p| p.1).sum::<f64>() / n;
    let observed = match limit {
        TrendLimit::MaxVariance(_) => {
            points.iter().map(|p| (p.1 - mean_v).powi(2)).sum::<f64>() / n
        }
        TrendLimit::MaxSlope(_) => {
            let mean_t = points.iter().map(|p| p.0 as f64 / 1000.0).sum::<f64>() / n;
            let (sxy, sxx) = points.iter().fold((0.0, 0.0), |(sxy, sxx), (t, v)| {
                let dt = *t as f64 / 1000.0 - mean_t;
                (sxy + dt * (v - mean_v), sxx + dt * dt)
            });
            (sxy / sxx).abs()
        }
    };
    let bound = match limit {
        TrendLimit::MaxSlope(b) | TrendLimit::MaxVariance(b) => b,
    };
    let outcome = if observed > bound {
        Outcome::Violation {
            observed,
            bound,
            margin: observed - bound,
        }
    } else {
        Outcome::Pass
    };
    let mut v = RuleVerdict::new(rule, frame.ts, outcome);
    v.evidence = frame
        .values
        .get(quantity)
        .map(|e| e.sources.clone())
        .unwrap_or_default();
    v.history_ts = points
        .iter()
        .map(|p| p.0)
        .filter(|t| *t != frame.ts)
        .collect();
    v
}

/// Consults access-control rules for `entity`. With no rule naming the
/// entity the decision is left to the registry (returns `None`).
pub fn check_access(
    rules: &[SSRule],
    entity: &EntityId,
    action: Action,
    ts: Ms,
) -> Option<RuleVerdict> {
    let rule = rules.iter().find(|r| {
        !r.retired
            && !r.draft
            && matches!(&r.kind, RuleKind::AccessControl { entity: e, .. } if e == entity)
    })?;
    let RuleKind::AccessControl { permitted, .. } = &rule.kind else {
        unreachable!()
    };
    let outcome = if permitted.contains(&action) {
        Outcome::Pass
    } else {
        Outcome::Violation {
            observed: 1.0,
            bound: 0.0,
            margin: 1.0,
        }
    };
    let mut v = RuleVerdict::new(rule, ts, outcome);
    v.note = Some(format!("{} requests {}", entity, action.as_str()));
    Some(v)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProposalError {
    #[error("need at least {needed} frames with `{quantity}`, got {got}")]
    InsufficientHistory {
        quantity: String,
        needed: usize,
        got: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleProposal {
    pub rule: SSRule,
    pub mean: f64,
    pub std_dev: f64,
    pub degenerate: bool,
}

/// Drafts a threshold `mean ∓ kappa·σ` (population σ) from benign frames.
/// The draft is never active until approved.
pub fn propose_update(
    benign_history: &[FusedFrame],
    quantity: &str,
    kappa: f64,
    author: &EntityId,
    ts: Ms,
) -> Result<RuleProposal, ProposalError> {
    let values: Vec<f64> = benign_history
        .iter()
        .filter_map(|f| f.value(quantity))
        .collect();
    if values.len() < MIN_PROPOSAL_FRAMES {
        return Err(ProposalError::InsufficientHistory {
            quantity: quantity.to_string(),
            needed: MIN_PROPOSAL_FRAMES,
            got: values.len(),
        });
    }
    // Welford's update.
    let (mut mean, mut m2) = (0.0f64, 0.0f64);
    for (i, v) in values.iter().enumerate() {
        let d = v - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (v - mean);
    }
    let std_dev = (m2 / values.len() as f64).sqrt();
    let (mut min, mut max) = (mean - kappa * std_dev, mean + kappa * std_dev);
    let degenerate = max - min < MIN_BAND;
    if degenerate {
        min = mean - MIN_BAND;
        max = mean + MIN_BAND;
    }
    Ok(RuleProposal {
        rule: SSRule {
            rule_id: format!("auto-{quantity}-envelope"),
            version: 1,
            level: RuleLevel::Process,
            kind: RuleKind::Threshold {
                quantity: quantity.to_string(),
                min,
                max,
            },
            target: quantity.to_string(),
            severity: Severity::Warning,
            author: author.clone(),
            effective_ts: ts,
            retired: false,
            draft: true,
        },
        mean,
        std_dev,
        degenerate,
    })
}
