//! Run report with a fixed key order.

use std::collections::BTreeMap;

use serde::Serialize;

use super::ScenarioConfig;
use crate::attack::AttackScript;
use crate::codec::Hash32;
use crate::ledger::{ChainStatus, Ledger};
use crate::pipeline::PipelineStats;
use crate::tintel::{Alert, Classification, MitigationAction, DETECTOR_WEAR};
use crate::types::{EntityId, Ms};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlertSummary {
    pub alert_id: String,
    pub severity: String,
    pub class: String,
    pub source: String,
    pub subject: String,
    pub state: String,
    /// Index into the scenario's attack list of the attack this alert is
    /// attributed to: the latest one started at or before detection.
    pub attack: Option<usize>,
    pub onset_ms: Option<Ms>,
    pub detection_ms: Ms,
    /// `ceil((detection - onset) / cadence)`.
    pub latency_frames: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefusedCommand {
    pub ts: Ms,
    pub target: EntityId,
    pub issued_by: EntityId,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationRecord {
    pub ts: Ms,
    pub model_version: Option<u64>,
    pub k_hat: Option<f64>,
    pub tau_hat: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerSummary {
    pub blocks: u64,
    pub entries: u64,
    pub by_kind: BTreeMap<String, u64>,
    pub chain: ChainStatus,
    pub head_hash: Hash32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplaySummary {
    pub log_digest: Hash32,
    /// Trajectory digest as recorded during the run.
    pub recorded: Hash32,
    /// Trajectory digest from re-feeding the log to a fresh twin.
    pub replayed: Hash32,
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario_digest: Hash32,
    pub seed: u64,
    pub horizon_ms: Ms,
    pub cadence_ms: Ms,
    pub frames: u64,
    pub alerts: Vec<AlertSummary>,
    /// Alerts not attributable to any attack, maintenance excluded.
    pub false_alarms: u64,
    pub mitigations: Vec<MitigationAction>,
    pub escalations: Vec<String>,
    pub refused_commands: Vec<RefusedCommand>,
    pub calibrations: Vec<CalibrationRecord>,
    pub pipeline: PipelineStats,
    pub ledger: LedgerSummary,
    pub replay: ReplaySummary,
    pub trace_digest: Hash32,
    pub attacks: Vec<AttackScript>,
}

impl RunReport {
    #[allow(clippy::too_many_arguments)]
    pub(super) fn build(
        cfg: &ScenarioConfig,
        alerts: &[Alert],
        frames: u64,
        mitigations: Vec<MitigationAction>,
        escalations: Vec<String>,
        refused_commands: Vec<RefusedCommand>,
        calibrations: Vec<CalibrationRecord>,
        pipeline: PipelineStats,
        ledger: &Ledger,
        replay: ReplaySummary,
        trace_digest: Hash32,
    ) -> Self {
        let mut false_alarms = 0;
        let summaries = alerts
            .iter()
            .map(|a| {
                let attack = cfg
                    .attacks
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.start_ms <= a.ts)
                    .max_by_key(|(i, s)| (s.start_ms, *i))
                    .map(|(i, _)| i);
                let maintenance = matches!(&a.classification, Classification::Anomaly { detector, .. } if detector == DETECTOR_WEAR);
                if attack.is_none() && !maintenance {
                    false_alarms += 1;
                }
                let onset = attack.map(|i| cfg.attacks[i].start_ms);
                AlertSummary {
                    alert_id: a.alert_id.clone(),
                    severity: a.severity.as_str().into(),
                    class: a.classification.class().into(),
                    source: a.classification.source().into(),
                    subject: a.subject.clone(),
                    state: a.state.as_str().into(),
                    attack,
                    onset_ms: onset,
                    detection_ms: a.ts,
                    latency_frames: onset.map(|o| (a.ts - o).div_ceil(cfg.cadence_ms)),
                }
            })
            .collect();
        let stats = ledger.stats();
        RunReport {
            scenario_digest: cfg.digest(),
            seed: cfg.seed,
            horizon_ms: cfg.horizon_ms,
            cadence_ms: cfg.cadence_ms,
            frames,
            alerts: summaries,
            false_alarms,
            mitigations,
            escalations,
            refused_commands,
            calibrations,
            pipeline,
            ledger: LedgerSummary {
                blocks: stats.blocks,
                entries: stats.entries,
                by_kind: stats
                    .by_kind
                    .iter()
                    .map(|(k, n)| (k.as_str().to_string(), *n))
                    .collect(),
                chain: ledger.verify_chain(),
                head_hash: ledger.head_hash(),
            },
            replay,
            trace_digest,
            attacks: cfg.attacks.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Digest of the serialized report.
    pub fn digest(&self) -> Hash32 {
        Hash32::of(self.to_json().as_bytes())
    }

    /// Earliest detection of attack `i`, by any alert attributed to it.
    pub fn first_detection(&self, attack: usize) -> Option<&AlertSummary> {
        self.alerts
            .iter()
            .filter(|a| a.attack == Some(attack))
            .min_by_key(|a| a.detection_ms)
    }
}
