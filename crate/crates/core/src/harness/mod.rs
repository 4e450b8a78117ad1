//! Scenario runner: wires plant, network, pipeline, twin, rules, threat
//! intelligence and ledger into one deterministic loop, then reports.

pub mod bundled;
mod ops;
mod report;
mod scenario;

use std::collections::VecDeque;

use thiserror::Error;

pub use ops::{
    audit, replay_bytes, verify, write_artifacts, Artifacts, ReplayVerdict, VerifyReport,
};
pub use report::{
    AlertSummary, CalibrationRecord, LedgerSummary, RefusedCommand, ReplaySummary, RunReport,
};
pub use scenario::{
    Approval, DetectorBlock, Devices, DutyStep, HumanSpec, ModelOverride, PlantBlock, PolicyBlock,
    ScenarioConfig,
};

use crate::auth::KeyStore;
use crate::codec::{Canonical, Encoder, Hash32};
use crate::ledger::{
    EntityKind, EntityRecord, Ledger, LedgerError, ModelUpdate, Payload, ProvenanceEvent,
};
use crate::pipeline::{
    Delivered, Expectation, FusedFrame, FusionConfig, IntegrityEvent, Pipeline, PipelineConfig,
    CONTROL_DUTY,
};
use crate::plant::{ActuatorCommand, CommandAction, Plant, PlantError, TelemetrySample};
use crate::rules::{evaluate, propose_update};
use crate::runtime::{EventLoop, Network, RuntimeError, SeedTree};
use crate::tintel::{
    root_cause, Alert, EvidenceReport, MitigationAction, MitigationKind, Tintel, TintelConfig,
    TintelError,
};
use crate::twin::{
    replay, trajectory_digest, ReplayLog, SyncFrame, Twin, TwinError, TwinModel, TwinState,
};
use crate::types::{to_canonical_unit, EntityId, Ms};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {field}: {reason}")]
    InvalidScenario { field: String, reason: String },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Twin(#[from] TwinError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Tintel(#[from] TintelError),
    #[error("ledger chain broken at block {index}")]
    BrokenChain { index: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Frames of fused history kept for trend rules and rule proposals.
const RULE_HISTORY: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    PlantStep,
    Sync,
    Command(ActuatorCommand),
}

impl Canonical for Event {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Event::PlantStep => {
                enc.u8(0);
            }
            Event::Sync => {
                enc.u8(1);
            }
            Event::Command(c) => {
                enc.u8(2);
                c.encode(enc);
            }
        }
    }
}

/// Everything a run produces.
pub struct RunOutput {
    pub report: RunReport,
    pub ledger: Ledger,
    pub log: ReplayLog,
    pub frames: Vec<SyncFrame>,
    pub integrity: Vec<IntegrityEvent>,
    pub alerts: Vec<Alert>,
    pub evidence: Vec<EvidenceReport>,
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    keys: KeyStore,
    plant: Plant,
    net: Network<TelemetrySample>,
    inbox: Vec<Delivered>,
    pipeline: Pipeline,
    twin: Twin,
    ledger: Ledger,
    tintel: Tintel,
    frames: Vec<SyncFrame>,
    history: VecDeque<FusedFrame>,
    integrity: Vec<IntegrityEvent>,
    mitigations: Vec<MitigationAction>,
    escalations: Vec<String>,
    refused: Vec<RefusedCommand>,
    calibrations: Vec<CalibrationRecord>,
    pending_calibration: bool,
    committed: Vec<bool>,
    anchored_upto: usize,
}

/// Runs a validated scenario to its horizon.
pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let mut sim = Sim::new(cfg)?;
    let mut el: EventLoop<Event> = EventLoop::new();
    el.schedule(cfg.plant.step_ms, "plant", Event::PlantStep)?;
    while let Some(ev) = el.pop_due(cfg.horizon_ms) {
        let now = ev.fire_at;
        match ev.payload {
            Event::PlantStep => sim.plant_step(now, &mut el)?,
            Event::Sync => sim.sync(now, &mut el)?,
            Event::Command(cmd) => sim.command(now, cmd)?,
        }
    }
    sim.ledger.seal(cfg.horizon_ms);
    sim.finish(el.trace_digest())
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Result<Self, HarnessError> {
        let d = &cfg.devices;
        let seeds = SeedTree::new(cfg.seed);
        let keys = KeyStore::new(cfg.seed);
        let mut plant = Plant::new(
            cfg.plant.params.clone(),
            d.actuator.clone(),
            d.sensors.clone(),
            &seeds,
            &keys,
        )?;
        for f in &cfg.plant.faults {
            plant.inject_fault(f.clone())?;
        }

        let mut net = Network::new();
        for s in &d.sensors {
            net.add_channel(s.entity_id.0.clone());
        }
        for a in &cfg.attacks {
            net.tap_install(a.build(&keys))?;
        }

        let mut fusion = FusionConfig {
            eps: cfg.detector.cross_eps.clone(),
            default_eps: cfg.detector.default_eps,
            ..Default::default()
        };
        let mut expected = std::collections::BTreeMap::new();
        for s in &d.sensors {
            let sigma_si = to_canonical_unit(s.quantity, &s.unit, s.noise_sigma).unwrap_or(0.0)
                - to_canonical_unit(s.quantity, &s.unit, 0.0).unwrap_or(0.0);
            fusion.sigmas.insert(s.entity_id.clone(), sigma_si.abs());
            expected.insert(
                s.entity_id.clone(),
                Expectation {
                    quantity: s.quantity,
                    period_ms: s.period_ms,
                },
            );
        }
        let pipeline = Pipeline::new(
            PipelineConfig {
                window_ms: cfg.cadence_ms,
                max_aoi_ms: cfg.detector.max_aoi_ms,
                expected,
                knowledge: cfg.knowledge.clone(),
                fusion,
            },
            d.twin.clone(),
        );

        let tintel = Tintel::new(TintelConfig {
            id: d.ti.clone(),
            actuator: d.actuator.clone(),
            detector: cfg.detector.ewma.clone(),
            policy: cfg.policy.actions.clone(),
        });

        let mut sim = Sim {
            cfg,
            keys,
            plant,
            net,
            inbox: Vec::new(),
            pipeline,
            twin: Twin::new(d.twin.clone(), cfg.digest(), cfg.seed),
            ledger: Ledger::new(),
            tintel,
            frames: Vec::new(),
            history: VecDeque::new(),
            integrity: Vec::new(),
            mitigations: Vec::new(),
            escalations: Vec::new(),
            refused: Vec::new(),
            calibrations: Vec::new(),
            pending_calibration: false,
            committed: vec![false; cfg.rules.len()],
            anchored_upto: 0,
        };
        sim.bootstrap()?;
        Ok(sim)
    }

    /// Registers the roster, installs the initial model and commits the
    /// rules effective at time zero.
    fn bootstrap(&mut self) -> Result<(), HarnessError> {
        let cfg = self.cfg;
        let d = &cfg.devices;
        let roster = cfg.roster();
        let kind_of = |id: &EntityId| {
            if *id == d.twin {
                EntityKind::Twin
            } else if *id == d.ti {
                EntityKind::TiService
            } else if *id == d.actuator {
                EntityKind::Actuator
            } else if d.sensors.iter().any(|s| s.entity_id == *id) {
                EntityKind::Sensor
            } else {
                EntityKind::Human
            }
        };
        let order =
            std::iter::once(&d.operator).chain(roster.keys().filter(|id| **id != d.operator));
        for id in order {
            self.ledger.register_entity(
                EntityRecord {
                    entity_id: id.clone(),
                    kind: kind_of(id),
                    mac_key: id.0.clone(),
                    access: roster[id].clone(),
                    registered_at: 0,
                },
                &d.operator,
                0,
            )?;
        }

        let p = &cfg.plant;
        let mut model = TwinModel::from_plant("conveyor", &p.params, p.step_ms);
        if let Some(o) = p.twin_model {
            model.k_hat = o.k_hat.unwrap_or(model.k_hat);
            model.tau_hat = o.tau_hat.unwrap_or(model.tau_hat);
        }
        let s = self.plant.state();
        let state = TwinState {
            ts: 0,
            speed: s.speed,
            wear: s.wear,
            duty: s.duty,
            actuator_on: true,
        };
        self.ledger.stage(
            Payload::ModelUpdate(ModelUpdate {
                model_id: model.model_id.clone(),
                old_version: 0,
                new_version: model.model_version,
                old_digest: Hash32::ZERO,
                new_digest: model.params_digest(),
                k_hat: model.k_hat,
                tau_hat: model.tau_hat,
                frames: 0,
            }),
            &d.twin,
            0,
        )?;
        self.twin.install(model, state);
        self.commit_rules(0)?;
        self.ledger.seal(0);
        Ok(())
    }

    fn commit_rules(&mut self, now: Ms) -> Result<(), HarnessError> {
        for (i, r) in self.cfg.rules.iter().enumerate() {
            if !self.committed[i] && r.effective_ts <= now {
                self.ledger
                    .stage(Payload::RuleUpdate(r.clone()), &r.author, now)?;
                self.committed[i] = true;
            }
        }
        Ok(())
    }

    fn plant_step(&mut self, now: Ms, el: &mut EventLoop<Event>) -> Result<(), HarnessError> {
        let step = self.cfg.plant.step_ms;
        for sample in self.plant.step(step) {
            let channel = sample.source.0.clone();
            for s in self.net.transmit(&channel, now, sample)? {
                self.inbox.push(Delivered {
                    channel: channel.clone(),
                    received_at: now,
                    sample: s,
                });
            }
        }
        if now + step <= self.cfg.horizon_ms {
            el.schedule(now + step, "plant", Event::PlantStep)?;
        }
        if now.is_multiple_of(self.cfg.cadence_ms) {
            el.schedule(now, "sync", Event::Sync)?;
        }
        Ok(())
    }

    fn sync(&mut self, now: Ms, el: &mut EventLoop<Event>) -> Result<(), HarnessError> {
        let cfg = self.cfg;
        let inbox = std::mem::take(&mut self.inbox);
        let out = self
            .pipeline
            .process(now, &inbox, &cfg.aux, &mut self.ledger, &self.keys)?;
        let mut frame = out.frame;
        let st = self.twin.state();
        frame.twin_inputs.insert(
            CONTROL_DUTY.to_string(),
            if st.actuator_on { st.duty } else { 0.0 },
        );
        let sf = self.twin.sync(frame)?;

        let rules = self.ledger.active_rules(now);
        let verdicts = evaluate(
            &rules,
            &sf.observed,
            &out.net_events,
            self.history.make_contiguous(),
        );
        if self.history.len() == RULE_HISTORY {
            self.history.pop_front();
        }
        self.history.push_back(sf.observed.clone());

        let raised = self
            .tintel
            .ingest(&sf, &verdicts, &out.integrity, &mut self.ledger)?;
        self.integrity.extend(out.integrity);
        self.frames.push(sf);
        for a in raised {
            self.mitigate(&a.alert_id, now, el)?;
        }
        if let Some(limit) = cfg.plant.wear_limit {
            let wear = self.twin.state().wear;
            if let Some(a) = self.tintel.maintenance_trigger(
                wear,
                limit,
                now,
                &cfg.devices.actuator,
                &mut self.ledger,
            )? {
                self.mitigate(&a.alert_id, now, el)?;
            }
        }

        for s in cfg.plant.duty_schedule.iter().filter(|s| s.at_ms == now) {
            let cmd = ActuatorCommand {
                target: cfg.devices.actuator.clone(),
                action: CommandAction::SetDuty(s.duty),
                issued_by: cfg.devices.operator.clone(),
                ts: now,
            };
            el.schedule(now, "plant", Event::Command(cmd))?;
        }
        for a in cfg.policy.approvals.iter().filter(|a| a.at_ms == now) {
            self.approve(a, now)?;
        }
        if self.pending_calibration || cfg.policy.calibrate_at_ms.contains(&now) {
            self.pending_calibration = false;
            self.calibrate(now);
        }
        self.commit_rules(now)?;
        self.anchor(now)?;
        self.ledger.seal(now);
        Ok(())
    }

    fn mitigate(
        &mut self,
        alert_id: &str,
        now: Ms,
        el: &mut EventLoop<Event>,
    ) -> Result<(), HarnessError> {
        let action = match self.tintel.mitigate(alert_id, now, &mut self.ledger) {
            Ok(a) => a,
            Err(TintelError::PolicyGap { alert_id, .. }) => {
                self.escalations.push(alert_id);
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };
        let ti = self.cfg.devices.ti.clone();
        match action.kind {
            MitigationKind::SafeStop | MitigationKind::PowerOff => {
                let cmd = ActuatorCommand {
                    target: action.target.clone(),
                    action: if action.kind == MitigationKind::SafeStop {
                        CommandAction::SafeStop
                    } else {
                        CommandAction::PowerOff
                    },
                    issued_by: ti,
                    ts: now,
                };
                el.schedule(now, "plant", Event::Command(cmd))?;
            }
            MitigationKind::ScheduleMaintenance => {
                self.plant.service();
                self.twin.observe_service(now);
                self.tintel.resolve(alert_id, now, &mut self.ledger)?;
            }
            MitigationKind::RequestCalibration => self.pending_calibration = true,
            MitigationKind::ProposeRuleUpdate => {
                let subject = self
                    .tintel
                    .alert(alert_id)
                    .map(|a| a.subject.clone())
                    .unwrap_or_default();
                let quantity = self.history.back().and_then(|f| {
                    f.values
                        .iter()
                        .find(|(_, e)| e.sources.iter().any(|r| r.source.0 == subject))
                        .map(|(q, _)| q.clone())
                });
                let detail = match quantity
                    .map(|q| propose_update(self.history.make_contiguous(), &q, 4.0, &ti, now))
                {
                    Some(Ok(p)) => format!(
                        "draft={} mean={:.6} std_dev={:.6}",
                        p.rule.rule_id, p.mean, p.std_dev
                    ),
                    Some(Err(e)) => format!("no proposal: {e}"),
                    None => "no proposal: subject has no fused quantity".into(),
                };
                self.ledger.stage(
                    Payload::Provenance(ProvenanceEvent {
                        subject,
                        event: "rule_proposal".into(),
                        detail,
                        digest: None,
                        related: vec![alert_id.to_string()],
                    }),
                    &ti,
                    now,
                )?;
            }
        }
        self.mitigations.push(action);
        Ok(())
    }

    fn command(&mut self, now: Ms, cmd: ActuatorCommand) -> Result<(), HarnessError> {
        let author = if self.ledger.registry().contains(&cmd.issued_by) {
            cmd.issued_by.clone()
        } else {
            self.cfg.devices.operator.clone()
        };
        let (event, detail) = match self.plant.apply_command(&cmd, self.ledger.registry()) {
            Ok(()) => {
                if cmd.target == self.cfg.devices.actuator {
                    self.twin.observe_command(&cmd);
                }
                (
                    "command",
                    format!("action={:?} issued_by={}", cmd.action, cmd.issued_by),
                )
            }
            Err(e) => {
                self.refused.push(RefusedCommand {
                    ts: now,
                    target: cmd.target.clone(),
                    issued_by: cmd.issued_by.clone(),
                    reason: e.to_string(),
                });
                (
                    "command_refused",
                    format!(
                        "action={:?} issued_by={} reason={e}",
                        cmd.action, cmd.issued_by
                    ),
                )
            }
        };
        self.ledger.stage(
            Payload::Provenance(ProvenanceEvent {
                subject: cmd.target.0.clone(),
                event: event.into(),
                detail,
                digest: Some(cmd.digest()),
                related: vec![],
            }),
            &author,
            now,
        )?;
        Ok(())
    }

    fn approve(&mut self, a: &Approval, now: Ms) -> Result<(), HarnessError> {
        let hist = self.history.make_contiguous();
        match propose_update(hist, &a.quantity, a.kappa, &self.cfg.devices.ti, now) {
            Ok(p) => {
                let mut rule = p.rule;
                rule.draft = false;
                rule.author = a.author.clone();
                rule.effective_ts = now;
                rule.version = self
                    .ledger
                    .rule_history(&rule.rule_id)
                    .last()
                    .map_or(1, |r| r.version + 1);
                self.ledger
                    .stage(Payload::RuleUpdate(rule), &a.author, now)?;
            }
            Err(e) => {
                self.ledger.stage(
                    Payload::Provenance(ProvenanceEvent {
                        subject: a.quantity.clone(),
                        event: "approval_failed".into(),
                        detail: e.to_string(),
                        digest: None,
                        related: vec![],
                    }),
                    &a.author,
                    now,
                )?;
            }
        }
        Ok(())
    }

    fn calibrate(&mut self, now: Ms) {
        let twin_id = self.cfg.devices.twin.clone();
        let rec = match self.twin.calibrate(
            self.cfg.policy.calibration_min_frames,
            &mut self.ledger,
            &twin_id,
            now,
        ) {
            Ok(m) => CalibrationRecord {
                ts: now,
                model_version: Some(m.model_version),
                k_hat: Some(m.k_hat),
                tau_hat: Some(m.tau_hat),
                error: None,
            },
            Err(e) => CalibrationRecord {
                ts: now,
                model_version: None,
                k_hat: None,
                tau_hat: None,
                error: Some(e.to_string()),
            },
        };
        self.calibrations.push(rec);
    }

    /// Commits a digest over the sync frames since the previous anchor.
    fn anchor(&mut self, now: Ms) -> Result<(), HarnessError> {
        let every = self.cfg.policy.anchor_every as usize;
        if self.frames.len() - self.anchored_upto < every {
            return Ok(());
        }
        let batch = &self.frames[self.anchored_upto..];
        let mut enc = Encoder::new();
        for f in batch {
            f.encode(&mut enc);
        }
        let detail = format!("frames={} from={} to={}", batch.len(), batch[0].ts, now);
        self.ledger.stage(
            Payload::Provenance(ProvenanceEvent {
                subject: self.cfg.devices.twin.0.clone(),
                event: "telemetry_anchor".into(),
                detail,
                digest: Some(Hash32::of(&enc.finish())),
                related: vec![],
            }),
            &self.cfg.devices.twin,
            now,
        )?;
        self.anchored_upto = self.frames.len();
        Ok(())
    }

    fn finish(self, trace_digest: Hash32) -> Result<RunOutput, HarnessError> {
        let cfg = self.cfg;
        let log = self.twin.log().clone();
        let recorded = trajectory_digest(&log.trajectory());
        let replayed = trajectory_digest(&replay(&log)?);
        let alerts = self.tintel.alerts().to_vec();
        let taps: Vec<String> = cfg.attacks.iter().map(|a| a.describe()).collect();
        let evidence = alerts
            .iter()
            .map(|a| root_cause(a, &self.ledger, &self.frames, 10 * cfg.cadence_ms, &taps))
            .collect();
        let report = RunReport::build(
            cfg,
            &alerts,
            self.frames.len() as u64,
            self.mitigations,
            self.escalations,
            self.refused,
            self.calibrations,
            self.pipeline.stats().clone(),
            &self.ledger,
            ReplaySummary {
                log_digest: log.digest(),
                recorded,
                replayed,
                deterministic: recorded == replayed,
            },
            trace_digest,
        );
        Ok(RunOutput {
            report,
            ledger: self.ledger,
            log,
            frames: self.frames,
            integrity: self.integrity,
            alerts,
            evidence,
        })
    }
}
