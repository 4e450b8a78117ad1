//! The digital twin: mirrors commanded inputs through its own conveyor
//! model, pairs predictions with fused observations, records everything
//! for replay, runs what-if rollouts and re-fits its parameters.

mod calibrate;
mod log;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Canonical, DecodeError, Decoder, Encoder, Hash32};
use crate::pipeline::{Estimate, FusedFrame, CONTROL_DUTY};
use crate::plant::{ActuatorCommand, CommandAction, ConveyorState, PlantParams};
use crate::types::{EntityId, Ms};

pub use calibrate::{fit, Fit, DEFAULT_MIN_FRAMES};
pub use log::{
    first_divergence, replay, trajectory_digest, trajectory_from_bytes, trajectory_to_bytes,
    LogRecord, ReplayLog, TrajectoryPoint, REPLAY_MAGIC, TRAJECTORY_MAGIC,
};

#[derive(Debug, Error, PartialEq)]
pub enum TwinError {
    #[error("twin has no model installed")]
    UninitializedModel,
    #[error("need at least {need} frames, have {have}")]
    InsufficientData { have: usize, need: usize },
    #[error("duty did not vary over the calibration window")]
    PoorExcitation,
    #[error("fit is not a stable first-order lag (a = {a})")]
    DegenerateFit { a: f64 },
    #[error("replay log is corrupt: {0}")]
    CorruptLog(String),
    #[error("frame at {ts} precedes twin time {now}")]
    OutOfOrder { ts: Ms, now: Ms },
    #[error("calibration could not be recorded: {0}")]
    Ledger(String),
}

/// Parameters of the twin's conveyor model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinModel {
    pub model_id: String,
    pub k_hat: f64,
    pub tau_hat: f64,
    /// Integration step of the model (ms).
    pub step_ms: Ms,
    pub wear_rate: f64,
    pub ambient_c: f64,
    pub heat_per_speed: f64,
    pub vibration_per_speed: f64,
    pub model_version: u64,
}

impl TwinModel {
    /// A model that matches `params` exactly.
    pub fn from_plant(model_id: impl Into<String>, params: &PlantParams, step_ms: Ms) -> Self {
        Self {
            model_id: model_id.into(),
            k_hat: params.k,
            tau_hat: params.tau_s,
            step_ms,
            wear_rate: params.wear_rate,
            ambient_c: params.ambient_c,
            heat_per_speed: params.heat_per_speed,
            vibration_per_speed: params.vibration_per_speed,
            model_version: 1,
        }
    }

    fn encode_params(&self, enc: &mut Encoder) {
        enc.str(&self.model_id)
            .f64(self.k_hat)
            .f64(self.tau_hat)
            .u64(self.step_ms)
            .f64(self.wear_rate)
            .f64(self.ambient_c)
            .f64(self.heat_per_speed)
            .f64(self.vibration_per_speed);
    }

    /// Digest of the parameters, excluding the version.
    pub fn params_digest(&self) -> Hash32 {
        let mut enc = Encoder::new();
        self.encode_params(&mut enc);
        Hash32::of(&enc.finish())
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            model_id: dec.str()?,
            k_hat: dec.f64()?,
            tau_hat: dec.f64()?,
            step_ms: dec.u64()?,
            wear_rate: dec.f64()?,
            ambient_c: dec.f64()?,
            heat_per_speed: dec.f64()?,
            vibration_per_speed: dec.f64()?,
            model_version: dec.u64()?,
        })
    }

    /// Advances `state` by `dt` ms in whole model steps plus a remainder.
    pub fn advance(&self, state: &mut TwinState, dt: Ms) {
        let mut c = ConveyorState {
            duty: if state.actuator_on { state.duty } else { 0.0 },
            speed: state.speed,
            k: self.k_hat,
            tau_s: self.tau_hat,
            wear: state.wear,
        };
        let step = self.step_ms.max(1);
        let mut left = dt;
        while left > 0 {
            let h = left.min(step);
            c.euler_step(h, self.wear_rate);
            left -= h;
        }
        state.speed = c.speed;
        state.wear = c.wear;
        state.ts += dt;
    }

    /// Predicted observable quantities for `state`, keyed by quantity name.
    pub fn predict(&self, state: &TwinState) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("speed".to_string(), state.speed),
            (
                "temperature".to_string(),
                self.ambient_c + self.heat_per_speed * state.speed,
            ),
            (
                "vibration".to_string(),
                self.vibration_per_speed * state.speed * (1.0 + state.wear),
            ),
        ])
    }
}

impl Canonical for TwinModel {
    fn encode(&self, enc: &mut Encoder) {
        self.encode_params(enc);
        enc.u64(self.model_version);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwinState {
    pub ts: Ms,
    pub speed: f64,
    pub wear: f64,
    /// Duty last commanded to the mirrored actuator.
    pub duty: f64,
    pub actuator_on: bool,
}

impl TwinState {
    pub fn at_rest(ts: Ms) -> Self {
        Self {
            ts,
            speed: 0.0,
            wear: 0.0,
            duty: 0.0,
            actuator_on: true,
        }
    }

    /// Mirrors an accepted actuator command.
    pub fn apply(&mut self, action: CommandAction) {
        match action {
            CommandAction::SetDuty(d) => {
                if self.actuator_on {
                    self.duty = d;
                }
            }
            CommandAction::SafeStop => self.duty = 0.0,
            CommandAction::PowerOff => {
                self.duty = 0.0;
                self.actuator_on = false;
            }
        }
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            ts: dec.u64()?,
            speed: dec.f64()?,
            wear: dec.f64()?,
            duty: dec.f64()?,
            actuator_on: dec.bool()?,
        })
    }
}

impl Canonical for TwinState {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.ts)
            .f64(self.speed)
            .f64(self.wear)
            .f64(self.duty)
            .bool(self.actuator_on);
    }
}

/// A fused observation paired with the twin's one-step prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncFrame {
    pub ts: Ms,
    pub observed: FusedFrame,
    pub predicted: BTreeMap<String, f64>,
    /// `observed - predicted` for quantities present in both.
    pub residual: BTreeMap<String, f64>,
    pub model_version: u64,
    /// Duty the twin applied over the interval ending at `ts`.
    pub duty: f64,
}

fn encode_map(enc: &mut Encoder, m: &BTreeMap<String, f64>) {
    enc.u32(m.len() as u32);
    for (k, v) in m {
        enc.str(k).f64(*v);
    }
}

fn decode_map(dec: &mut Decoder<'_>) -> Result<BTreeMap<String, f64>, DecodeError> {
    let mut m = BTreeMap::new();
    for _ in 0..dec.u32()? {
        let k = dec.str()?;
        m.insert(k, dec.f64()?);
    }
    Ok(m)
}

impl Canonical for SyncFrame {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.ts);
        self.observed.encode(enc);
        encode_map(enc, &self.predicted);
        encode_map(enc, &self.residual);
        enc.u64(self.model_version).f64(self.duty);
    }
}

impl SyncFrame {
    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Self {
            ts: dec.u64()?,
            observed: FusedFrame::decode(dec)?,
            predicted: decode_map(dec)?,
            residual: decode_map(dec)?,
            model_version: dec.u64()?,
            duty: dec.f64()?,
        })
    }
}

/// One point of a [`Twin::simulate`] rollout.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimPoint {
    pub ts: Ms,
    pub state: TwinState,
    pub predicted: BTreeMap<String, f64>,
}

impl SimPoint {
    /// The point as a frame, so candidate rules can be evaluated on it.
    pub fn to_frame(&self) -> FusedFrame {
        FusedFrame {
            ts: self.ts,
            values: self
                .predicted
                .iter()
                .map(|(q, v)| {
                    (
                        q.clone(),
                        Estimate {
                            estimate: *v,
                            confidence: 1.0,
                            sources: Vec::new(),
                        },
                    )
                })
                .collect(),
            aux: BTreeMap::new(),
            twin_inputs: BTreeMap::from([(CONTROL_DUTY.to_string(), self.state.duty)]),
        }
    }
}

/// Number of recent sync frames retained for calibration.
pub const HISTORY_CAPACITY: usize = 2000;

#[derive(Debug, Clone)]
pub struct Twin {
    id: EntityId,
    model: Option<TwinModel>,
    state: TwinState,
    history: VecDeque<SyncFrame>,
    log: ReplayLog,
}

impl Twin {
    /// An uninitialized twin that records into a log stamped with the
    /// scenario digest and seed.
    pub fn new(id: EntityId, scenario_digest: Hash32, seed: u64) -> Self {
        Self {
            id,
            model: None,
            state: TwinState::at_rest(0),
            history: VecDeque::new(),
            log: ReplayLog::new(scenario_digest, seed),
        }
    }

    pub fn id(&self) -> &EntityId {
        &self.id
    }

    pub fn model(&self) -> Option<&TwinModel> {
        self.model.as_ref()
    }

    pub fn state(&self) -> &TwinState {
        &self.state
    }

    pub fn log(&self) -> &ReplayLog {
        &self.log
    }

    pub fn history(&self) -> impl Iterator<Item = &SyncFrame> {
        self.history.iter()
    }

    /// Installs a model and the state it starts from.
    pub fn install(&mut self, model: TwinModel, state: TwinState) {
        self.log.records.push(LogRecord::Model {
            model: model.clone(),
            state,
        });
        self.model = Some(model);
        self.state = state;
    }

    /// Mirrors a command the plant accepted.
    pub fn observe_command(&mut self, cmd: &ActuatorCommand) {
        self.state.apply(cmd.action);
        self.log.records.push(LogRecord::Command(cmd.clone()));
    }

    /// Mirrors maintenance on the physical asset.
    pub fn observe_service(&mut self, ts: Ms) {
        self.state.wear = 0.0;
        self.log.records.push(LogRecord::Service { ts });
    }

    /// Advances the prediction to `frame.ts` and pairs it with the frame.
    pub fn sync(&mut self, frame: FusedFrame) -> Result<SyncFrame, TwinError> {
        let model = self.model.as_ref().ok_or(TwinError::UninitializedModel)?;
        if frame.ts < self.state.ts {
            return Err(TwinError::OutOfOrder {
                ts: frame.ts,
                now: self.state.ts,
            });
        }
        let duty = if self.state.actuator_on {
            self.state.duty
        } else {
            0.0
        };
        let dt = frame.ts - self.state.ts;
        model.advance(&mut self.state, dt);
        let predicted = model.predict(&self.state);
        let residual = predicted
            .iter()
            .filter_map(|(q, p)| frame.value(q).map(|o| (q.clone(), o - p)))
            .collect();
        let sf = SyncFrame {
            ts: frame.ts,
            observed: frame,
            predicted,
            residual,
            model_version: model.model_version,
            duty,
        };
        self.log.records.push(LogRecord::Frame(sf.clone()));
        if self.history.len() == HISTORY_CAPACITY {
            self.history.pop_front();
        }
        self.history.push_back(sf.clone());
        Ok(sf)
    }

    /// Pure rollout from `initial` under a piecewise-constant duty
    /// schedule `(from_ms, duty)`, sampled at every model step. Live state
    /// is untouched.
    pub fn simulate(
        &self,
        initial: TwinState,
        schedule: &[(Ms, f64)],
        horizon: Ms,
    ) -> Result<Vec<SimPoint>, TwinError> {
        let model = self.model.as_ref().ok_or(TwinError::UninitializedModel)?;
        Ok(simulate(model, initial, schedule, horizon))
    }
}

/// Rolls `model` forward from `initial` for `horizon` ms.
pub fn simulate(
    model: &TwinModel,
    initial: TwinState,
    schedule: &[(Ms, f64)],
    horizon: Ms,
) -> Vec<SimPoint> {
    let mut state = initial;
    let end = initial.ts + horizon;
    let step = model.step_ms.max(1);
    let mut out = Vec::new();
    while state.ts < end {
        if let Some((_, d)) = schedule.iter().rev().find(|(at, _)| *at <= state.ts) {
            state.duty = *d;
        }
        let dt = step.min(end - state.ts);
        model.advance(&mut state, dt);
        out.push(SimPoint {
            ts: state.ts,
            state,
            predicted: model.predict(&state),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::KeyStore;
    use crate::pipeline::RecordRef;
    use crate::plant::{Plant, SensorSpec};
    use crate::rules::{evaluate, RuleKind, RuleLevel, SSRule, Severity};
    use crate::runtime::SeedTree;
    use crate::types::{Action, Authorizer, Quantity};
    use proptest::prelude::*;

    struct AllowAll;
    impl Authorizer for AllowAll {
        fn permits(&self, _: &EntityId, _: Action) -> bool {
            true
        }
    }

    fn frame(ts: Ms, speed: f64) -> FusedFrame {
        FusedFrame {
            ts,
            values: BTreeMap::from([(
                "speed".to_string(),
                Estimate {
                    estimate: speed,
                    confidence: 1.0,
                    sources: vec![RecordRef {
                        source: "s1".into(),
                        seq: ts / 100,
                        ts,
                        imputed: false,
                        flagged: false,
                    }],
                },
            )]),
            aux: BTreeMap::new(),
            twin_inputs: BTreeMap::new(),
        }
    }

    fn model(k: f64, tau: f64) -> TwinModel {
        TwinModel::from_plant("conveyor", &PlantParams::new(k, tau), 10)
    }

    fn running(duty: f64, speed: f64) -> TwinState {
        TwinState {
            duty,
            speed,
            ..TwinState::at_rest(0)
        }
    }

    #[test]
    fn uninitialized_sync_fails() {
        let mut t = Twin::new("twin".into(), Hash32::ZERO, 1);
        assert_eq!(
            t.sync(frame(100, 1.0)).unwrap_err(),
            TwinError::UninitializedModel
        );
    }

    #[test]
    fn perfect_model_zero_residual() {
        let params = PlantParams {
            initial_duty: 0.3,
            ..PlantParams::new(2.0, 2.0)
        };
        let sensor = SensorSpec {
            entity_id: "s1".into(),
            quantity: Quantity::Speed,
            bias: 0.0,
            noise_sigma: 0.0,
            period_ms: 100,
            unit: "m/s".into(),
        };
        let mut plant = Plant::new(
            params.clone(),
            "m1".into(),
            vec![sensor],
            &SeedTree::new(1),
            &KeyStore::new(1),
        )
        .unwrap();
        let mut twin = Twin::new("twin".into(), Hash32::ZERO, 1);
        twin.install(
            TwinModel::from_plant("conveyor", &params, 10),
            running(0.3, 0.6),
        );
        let cmd = ActuatorCommand {
            target: "m1".into(),
            action: CommandAction::SetDuty(0.8),
            issued_by: "op".into(),
            ts: 0,
        };
        plant.apply_command(&cmd, &AllowAll).unwrap();
        twin.observe_command(&cmd);
        for _ in 0..50 {
            let mut last = None;
            for _ in 0..10 {
                for s in plant.step(10) {
                    last = Some(s);
                }
            }
            let s = last.unwrap();
            let sf = twin.sync(frame(s.ts, s.value)).unwrap();
            assert_eq!(sf.residual["speed"], 0.0);
            assert_eq!(sf.duty, 0.8);
        }
    }

    #[test]
    fn doubled_gain_residual() {
        // Observed k*duty = 1.0 against a twin at steady state 2k*duty = 2.0.
        let mut twin = Twin::new("twin".into(), Hash32::ZERO, 1);
        twin.install(model(4.0, 2.0), running(0.5, 2.0));
        let sf = twin.sync(frame(100, 1.0)).unwrap();
        assert!((sf.residual["speed"] - (-2.0 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn residual_only_for_shared_quantities() {
        let mut twin = Twin::new("twin".into(), Hash32::ZERO, 1);
        twin.install(model(2.0, 2.0), running(0.5, 1.0));
        let sf = twin.sync(frame(100, 1.0)).unwrap();
        assert_eq!(sf.residual.keys().collect::<Vec<_>>(), vec!["speed"]);
        assert_eq!(sf.predicted.len(), 3);
    }

    #[test]
    fn simulate_zero_duty_from_rest() {
        let twin = {
            let mut t = Twin::new("twin".into(), Hash32::ZERO, 1);
            t.install(model(2.0, 2.0), TwinState::at_rest(0));
            t
        };
        let traj = twin.simulate(TwinState::at_rest(0), &[], 5_000).unwrap();
        assert_eq!(traj.len(), 500);
        assert!(traj.iter().all(|p| p.state.speed == 0.0));
    }

    #[test]
    fn simulate_step_matches_closed_form() {
        let m = model(2.0, 2.0);
        let traj = simulate(&m, TwinState::at_rest(0), &[(0, 1.0)], 20_000);
        for p in traj.iter().filter(|p| p.ts >= 500) {
            let t = p.ts as f64 / 1000.0;
            let exact = 2.0 * (1.0 - (-t / 2.0).exp());
            assert!((p.state.speed - exact).abs() / exact < 0.01, "t={t}");
        }
    }

    #[test]
    fn simulated_overspeed_violates_candidate() {
        let m = model(2.0, 2.0);
        let traj = simulate(&m, running(0.5, 1.0), &[(1_000, 0.9)], 10_000);
        let rule = SSRule {
            rule_id: "candidate".into(),
            version: 1,
            level: RuleLevel::Device,
            kind: RuleKind::Threshold {
                quantity: "speed".into(),
                min: 0.2,
                max: 1.2,
            },
            target: "speed".into(),
            severity: Severity::Critical,
            author: "ti".into(),
            effective_ts: 0,
            retired: false,
            draft: true,
        };
        let mut live = rule.clone();
        live.draft = false;
        let violations = traj
            .iter()
            .filter(|p| {
                evaluate(std::slice::from_ref(&live), &p.to_frame(), &[], &[])[0].is_violation()
            })
            .count();
        // Oracle: steady state 1.8 > 1.2 and the crossing happens well
        // before the horizon.
        assert!(violations > 0);
    }

    #[test]
    fn power_off_mirrored() {
        let mut s = running(0.7, 1.4);
        s.apply(CommandAction::PowerOff);
        s.apply(CommandAction::SetDuty(0.5));
        assert_eq!(s.duty, 0.0);
        assert!(!s.actuator_on);
    }

    #[test]
    fn sync_frame_roundtrip() {
        let mut twin = Twin::new("twin".into(), Hash32::ZERO, 1);
        twin.install(model(2.0, 2.0), running(0.5, 1.0));
        let mut f = frame(100, 1.01);
        f.aux.insert("order".into(), "PO-7".into());
        f.twin_inputs.insert("duty".into(), 0.5);
        let sf = twin.sync(f).unwrap();
        let bytes = sf.to_canonical();
        let mut dec = Decoder::new(&bytes);
        assert_eq!(SyncFrame::decode(&mut dec).unwrap(), sf);
        dec.finish().unwrap();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn simulate_leaves_live_state_alone(
            k in 0.5f64..4.0,
            tau in 0.2f64..5.0,
            duty in 0.0f64..1.0,
            speed in 0.0f64..3.0,
            sched in prop::collection::vec((0u64..3000, 0.0f64..1.0), 0..5),
            horizon in 1u64..3000,
        ) {
            let mut twin = Twin::new("twin".into(), Hash32::ZERO, 9);
            twin.install(model(k, tau), running(duty, speed));
            twin.sync(frame(100, speed)).unwrap();
            let before = (twin.state().digest(), twin.log().digest(), twin.model().unwrap().params_digest());
            let traj = twin.simulate(running(duty, speed), &sched, horizon).unwrap();
            prop_assert!(!traj.is_empty());
            let after = (twin.state().digest(), twin.log().digest(), twin.model().unwrap().params_digest());
            prop_assert_eq!(before, after);
        }
    }
}
