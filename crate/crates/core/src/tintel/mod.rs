//! Threat intelligence: turns rule verdicts, residuals and integrity events
//! into deduplicated alerts, maps alerts to mitigations through a policy
//! table, and assembles root-cause evidence.

mod detector;
mod report;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{AlertRecordBody, Ledger, LedgerError, Payload, ProvenanceEvent};
use crate::pipeline::{IntegrityEvent, IntegrityKind, RecordRef};
use crate::rules::{RuleVerdict, Severity};
use crate::twin::SyncFrame;
use crate::types::{EntityId, Ms};

pub use detector::{Detector, DetectorConfig, MaintenanceTrigger, Observation, QuantityStats};
pub use report::{root_cause, EvidenceItem, EvidenceReport};

#[derive(Debug, Error)]
pub enum TintelError {
    #[error("no policy maps alert {alert_id} ({key})")]
    PolicyGap { alert_id: String, key: String },
    #[error("unknown alert {0}")]
    UnknownAlert(String),
    #[error("alert {alert_id} is {state:?}, expected raised")]
    NotRaised { alert_id: String, state: AlertState },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Classification {
    KnownThreat { rule_id: String, version: u64 },
    Anomaly { detector: String, score: f64 },
}

impl Classification {
    pub fn class(&self) -> &'static str {
        match self {
            Classification::KnownThreat { .. } => "known_threat",
            Classification::Anomaly { .. } => "anomaly",
        }
    }

    /// `rule_id` or detector name.
    pub fn source(&self) -> &str {
        match self {
            Classification::KnownThreat { rule_id, .. } => rule_id,
            Classification::Anomaly { detector, .. } => detector,
        }
    }

    /// Identity used for duplicate suppression.
    pub fn key(&self) -> String {
        format!("{}:{}", self.class(), self.source())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertState {
    Raised,
    Mitigating,
    Resolved,
}

impl AlertState {
    pub fn as_str(self) -> &'static str {
        match self {
            AlertState::Raised => "raised",
            AlertState::Mitigating => "mitigating",
            AlertState::Resolved => "resolved",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Evidence {
    /// A sync frame in the replay log.
    Frame {
        ts: Ms,
    },
    Verdict {
        rule_id: String,
        version: u64,
        ts: Ms,
    },
    Record(RecordRef),
    Integrity {
        source: EntityId,
        seq: u64,
        sample_ts: Ms,
        event: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub alert_id: String,
    pub ts: Ms,
    pub severity: Severity,
    pub classification: Classification,
    /// Quantity or entity the alert is about.
    pub subject: String,
    /// Physical device implicated, when one can be singled out.
    pub device: Option<EntityId>,
    pub evidence: Vec<Evidence>,
    pub state: AlertState,
    pub resolved_at: Option<Ms>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MitigationKind {
    SafeStop,
    PowerOff,
    ScheduleMaintenance,
    RequestCalibration,
    ProposeRuleUpdate,
}

impl MitigationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MitigationKind::SafeStop => "safe_stop",
            MitigationKind::PowerOff => "power_off",
            MitigationKind::ScheduleMaintenance => "schedule_maintenance",
            MitigationKind::RequestCalibration => "request_calibration",
            MitigationKind::ProposeRuleUpdate => "propose_rule_update",
        }
    }

    pub fn is_physical(self) -> bool {
        matches!(self, MitigationKind::SafeStop | MitigationKind::PowerOff)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationAction {
    pub kind: MitigationKind,
    pub target: EntityId,
    pub issued_at: Ms,
    pub alert_id: String,
}

/// Maps alerts to mitigation kinds. Keys are tried from most to least
/// specific: `class:source`, `class:severity`, `class`, where class is
/// `known_threat` or `anomaly` and source is the rule id or detector name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Policy(pub BTreeMap<String, MitigationKind>);

impl Policy {
    pub fn lookup(&self, alert: &Alert) -> Option<MitigationKind> {
        let c = &alert.classification;
        [
            c.key(),
            format!("{}:{}", c.class(), alert.severity.as_str()),
            c.class().to_string(),
        ]
        .iter()
        .find_map(|k| self.0.get(k).copied())
    }
}

/// Detector names used for integrity-driven anomalies.
pub const DETECTOR_RESIDUAL: &str = "residual";
pub const DETECTOR_AOI: &str = "aoi";
pub const DETECTOR_SOURCE_AUTH: &str = "source-auth";
pub const DETECTOR_WRANGLE: &str = "wrangle";
pub const DETECTOR_WEAR: &str = "wear";

#[derive(Debug, Clone)]
pub struct TintelConfig {
    /// Identity under which alerts and mitigations are recorded.
    pub id: EntityId,
    /// Conveyor actuator targeted by stop commands.
    pub actuator: EntityId,
    pub detector: DetectorConfig,
    pub policy: Policy,
}

#[derive(Debug, Clone)]
struct Open {
    index: usize,
    clear_streak: usize,
}

#[derive(Debug, Clone)]
pub struct Tintel {
    cfg: TintelConfig,
    detector: Detector,
    alerts: Vec<Alert>,
    open: BTreeMap<(String, String), Open>,
    maintenance: MaintenanceTrigger,
}

/// Alert candidate: subject, classification, severity, target, evidence.
type Candidate = (
    String,
    Classification,
    Severity,
    Option<EntityId>,
    Vec<Evidence>,
);

impl Tintel {
    pub fn new(cfg: TintelConfig) -> Self {
        Self {
            detector: Detector::new(cfg.detector.clone()),
            cfg,
            alerts: Vec::new(),
            open: BTreeMap::new(),
            maintenance: MaintenanceTrigger::default(),
        }
    }

    pub fn alerts(&self) -> &[Alert] {
        &self.alerts
    }

    pub fn alert(&self, alert_id: &str) -> Option<&Alert> {
        self.alerts.iter().find(|a| a.alert_id == alert_id)
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    /// Consumes one sync frame with its verdicts and the integrity events
    /// of the same window; returns newly raised alerts.
    pub fn ingest(
        &mut self,
        frame: &SyncFrame,
        verdicts: &[RuleVerdict],
        integrity: &[IntegrityEvent],
        ledger: &mut Ledger,
    ) -> Result<Vec<Alert>, LedgerError> {
        let mut active: Vec<Candidate> = Vec::new();

        for v in verdicts
            .iter()
            .filter(|v| v.is_violation() && v.severity == Severity::Critical)
        {
            let mut ev = vec![
                Evidence::Frame { ts: frame.ts },
                Evidence::Verdict {
                    rule_id: v.rule_id.clone(),
                    version: v.version,
                    ts: v.ts,
                },
            ];
            ev.extend(v.evidence.iter().cloned().map(Evidence::Record));
            let device = single_source(&v.evidence);
            active.push((
                v.target.clone(),
                Classification::KnownThreat {
                    rule_id: v.rule_id.clone(),
                    version: v.version,
                },
                v.severity,
                device,
                ev,
            ));
        }

        self.detector.align(frame.model_version);
        for (q, r) in &frame.residual {
            let o = self.detector.observe(q, *r);
            if o.triggered {
                let refs = frame
                    .observed
                    .values
                    .get(q)
                    .map(|e| e.sources.clone())
                    .unwrap_or_default();
                let mut ev = vec![Evidence::Frame { ts: frame.ts }];
                let device = single_source(&refs);
                ev.extend(refs.into_iter().map(Evidence::Record));
                active.push((
                    q.clone(),
                    Classification::Anomaly {
                        detector: DETECTOR_RESIDUAL.into(),
                        score: o.score,
                    },
                    Severity::Warning,
                    device,
                    ev,
                ));
            }
        }

        for e in integrity {
            let (detector, severity) = match &e.kind {
                IntegrityKind::Stale { .. } | IntegrityKind::SeqRegression { .. } => {
                    (DETECTOR_AOI, Severity::Warning)
                }
                IntegrityKind::Rejected { .. } => (DETECTOR_SOURCE_AUTH, Severity::Critical),
                IntegrityKind::UnknownUnit { .. } => (DETECTOR_WRANGLE, Severity::Info),
            };
            let ev = Evidence::Integrity {
                source: e.source.clone(),
                seq: e.seq,
                sample_ts: e.sample_ts,
                event: e.kind.label().into(),
            };
            let score = match &e.kind {
                IntegrityKind::Stale { aoi_ms } => *aoi_ms as f64,
                _ => 1.0,
            };
            // Several events of one source in a window collapse into one entry.
            if let Some(existing) = active
                .iter_mut()
                .find(|a| a.0 == e.source.as_str() && a.1.source() == detector)
            {
                existing.4.push(ev);
                continue;
            }
            active.push((
                e.source.0.clone(),
                Classification::Anomaly {
                    detector: detector.into(),
                    score,
                },
                severity,
                Some(e.source.clone()),
                vec![Evidence::Frame { ts: frame.ts }, ev],
            ));
        }

        // Resolution bookkeeping for alerts already under mitigation.
        let firing: Vec<(String, String)> =
            active.iter().map(|a| (a.0.clone(), a.1.key())).collect();
        let n = self.cfg.detector.n;
        let mut resolved = Vec::new();
        for (key, open) in self.open.iter_mut() {
            if firing.contains(key) {
                open.clear_streak = 0;
                continue;
            }
            open.clear_streak += 1;
            let alert = &mut self.alerts[open.index];
            if alert.state == AlertState::Mitigating && open.clear_streak >= n {
                alert.state = AlertState::Resolved;
                alert.resolved_at = Some(frame.ts);
                resolved.push(key.clone());
            }
        }
        for key in resolved {
            let open = self.open.remove(&key).expect("present");
            let a = self.alerts[open.index].clone();
            self.record(&a, "condition cleared", frame.ts, ledger)?;
        }

        let mut raised = Vec::new();
        for (subject, classification, severity, device, evidence) in active {
            let key = (subject.clone(), classification.key());
            if self.open.contains_key(&key) {
                continue;
            }
            let alert = Alert {
                alert_id: format!("A-{:04}", self.alerts.len() + 1),
                ts: frame.ts,
                severity,
                classification,
                subject,
                device,
                evidence,
                state: AlertState::Raised,
                resolved_at: None,
            };
            self.record(&alert, "", frame.ts, ledger)?;
            self.open.insert(
                key,
                Open {
                    index: self.alerts.len(),
                    clear_streak: 0,
                },
            );
            self.alerts.push(alert.clone());
            raised.push(alert);
        }
        Ok(raised)
    }

    /// Checks plant wear; on an upward crossing raises a maintenance alert
    /// and returns it for mitigation.
    pub fn maintenance_trigger(
        &mut self,
        wear: f64,
        wear_limit: f64,
        ts: Ms,
        machine: &EntityId,
        ledger: &mut Ledger,
    ) -> Result<Option<Alert>, LedgerError> {
        if !self.maintenance.check(wear, wear_limit) {
            return Ok(None);
        }
        let alert = Alert {
            alert_id: format!("A-{:04}", self.alerts.len() + 1),
            ts,
            severity: Severity::Info,
            classification: Classification::Anomaly {
                detector: DETECTOR_WEAR.into(),
                score: if wear_limit > 0.0 {
                    wear / wear_limit
                } else {
                    1.0
                },
            },
            subject: machine.0.clone(),
            device: Some(machine.clone()),
            evidence: vec![Evidence::Frame { ts }],
            state: AlertState::Raised,
            resolved_at: None,
        };
        self.record(
            &alert,
            &format!("wear={wear:.6} limit={wear_limit}"),
            ts,
            ledger,
        )?;
        self.alerts.push(alert.clone());
        Ok(Some(alert))
    }

    /// Looks the alert up in the policy and records the resulting action.
    /// Without a mapping the alert stays raised and an escalation entry for
    /// the operator is written instead.
    pub fn mitigate(
        &mut self,
        alert_id: &str,
        ts: Ms,
        ledger: &mut Ledger,
    ) -> Result<MitigationAction, TintelError> {
        let idx = self
            .alerts
            .iter()
            .position(|a| a.alert_id == alert_id)
            .ok_or_else(|| TintelError::UnknownAlert(alert_id.into()))?;
        let alert = self.alerts[idx].clone();
        if alert.state != AlertState::Raised {
            return Err(TintelError::NotRaised {
                alert_id: alert_id.into(),
                state: alert.state,
            });
        }
        let Some(kind) = self.cfg.policy.lookup(&alert) else {
            ledger.stage(
                Payload::Provenance(ProvenanceEvent {
                    subject: alert.subject.clone(),
                    event: "escalation".into(),
                    detail: format!(
                        "alert={} class={} no policy mapping",
                        alert.alert_id,
                        alert.classification.key()
                    ),
                    digest: None,
                    related: vec![alert.alert_id.clone()],
                }),
                &self.cfg.id,
                ts,
            )?;
            return Err(TintelError::PolicyGap {
                alert_id: alert_id.into(),
                key: alert.classification.key(),
            });
        };
        let target = match kind {
            MitigationKind::PowerOff => alert
                .device
                .clone()
                .unwrap_or_else(|| self.cfg.actuator.clone()),
            MitigationKind::SafeStop => self.cfg.actuator.clone(),
            _ => alert
                .device
                .clone()
                .unwrap_or_else(|| EntityId(alert.subject.clone())),
        };
        let action = MitigationAction {
            kind,
            target: target.clone(),
            issued_at: ts,
            alert_id: alert_id.into(),
        };
        ledger.stage(
            Payload::Provenance(ProvenanceEvent {
                subject: target.0.clone(),
                event: "mitigation".into(),
                detail: format!("action={} alert={}", kind.as_str(), alert_id),
                digest: None,
                related: vec![alert_id.to_string()],
            }),
            &self.cfg.id,
            ts,
        )?;
        self.alerts[idx].state = AlertState::Mitigating;
        let a = self.alerts[idx].clone();
        self.record(&a, kind.as_str(), ts, ledger)?;
        Ok(action)
    }

    /// Marks the open maintenance alert as done once wear is back down.
    pub fn resolve(
        &mut self,
        alert_id: &str,
        ts: Ms,
        ledger: &mut Ledger,
    ) -> Result<(), TintelError> {
        let idx = self
            .alerts
            .iter()
            .position(|a| a.alert_id == alert_id)
            .ok_or_else(|| TintelError::UnknownAlert(alert_id.into()))?;
        if self.alerts[idx].state != AlertState::Mitigating {
            return Err(TintelError::NotRaised {
                alert_id: alert_id.into(),
                state: self.alerts[idx].state,
            });
        }
        self.alerts[idx].state = AlertState::Resolved;
        self.alerts[idx].resolved_at = Some(ts);
        self.open.retain(|_, o| o.index != idx);
        let a = self.alerts[idx].clone();
        self.record(&a, "", ts, ledger)?;
        Ok(())
    }

    fn record(
        &self,
        alert: &Alert,
        detail: &str,
        ts: Ms,
        ledger: &mut Ledger,
    ) -> Result<(), LedgerError> {
        let mut d = format!("ts={}", alert.ts);
        if let Classification::Anomaly { score, .. } = &alert.classification {
            d.push_str(&format!(" score={score:.3}"));
        }
        if !detail.is_empty() {
            d.push(' ');
            d.push_str(detail);
        }
        ledger.stage(
            Payload::AlertRecord(AlertRecordBody {
                alert_id: alert.alert_id.clone(),
                subject: alert.subject.clone(),
                classification: alert.classification.key(),
                severity: alert.severity,
                state: alert.state.as_str().into(),
                detail: d,
            }),
            &self.cfg.id,
            ts,
        )?;
        Ok(())
    }
}

fn single_source(refs: &[RecordRef]) -> Option<EntityId> {
    let first = refs.first()?;
    refs.iter()
        .all(|r| r.source == first.source)
        .then(|| first.source.clone())
}
