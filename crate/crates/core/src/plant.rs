//! Simulated physical assets: a motor-driven conveyor with first-order lag,
//! plus the sensors that observe it.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auth::{compute_tag, sample_tag_input, KeyStore};
use crate::codec::{Canonical, DecodeError, Decoder, Encoder};
use crate::runtime::SeedTree;
use crate::types::{from_canonical_unit, Action, Authorizer, EntityId, Ms, Quantity};

#[derive(Debug, Error, PartialEq)]
pub enum PlantError {
    #[error("unknown command target `{0}`")]
    UnknownTarget(EntityId),
    #[error("`{0}` is not permitted to issue commands")]
    UnauthorizedIssuer(EntityId),
    #[error("duty {0} outside [0, 1]")]
    InvalidDuty(f64),
    #[error("action not supported by `{0}`")]
    InvalidAction(EntityId),
    #[error("sensor `{0}` has unit `{1}` unknown for its quantity")]
    UnknownUnit(EntityId, String),
}

/// Conveyor dynamics parameters and auxiliary sensing models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    /// Belt speed per unit duty at steady state (m/s).
    pub k: f64,
    /// First-order lag (s).
    pub tau_s: f64,
    #[serde(default)]
    pub wear_rate: f64,
    #[serde(default)]
    pub initial_duty: f64,
    /// Defaults to the steady state `k * initial_duty`.
    #[serde(default)]
    pub initial_speed: Option<f64>,
    #[serde(default = "default_ambient")]
    pub ambient_c: f64,
    #[serde(default = "default_heat")]
    pub heat_per_speed: f64,
    #[serde(default = "default_vib")]
    pub vibration_per_speed: f64,
}

fn default_ambient() -> f64 {
    22.0
}
fn default_heat() -> f64 {
    3.0
}
fn default_vib() -> f64 {
    2.0
}

impl PlantParams {
    pub fn new(k: f64, tau_s: f64) -> Self {
        Self {
            k,
            tau_s,
            wear_rate: 0.0,
            initial_duty: 0.0,
            initial_speed: None,
            ambient_c: default_ambient(),
            heat_per_speed: default_heat(),
            vibration_per_speed: default_vib(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConveyorState {
    pub duty: f64,
    pub speed: f64,
    pub k: f64,
    pub tau_s: f64,
    pub wear: f64,
}

impl ConveyorState {
    /// One explicit Euler step of `speed' = (k * duty - speed) / tau`.
    pub fn euler_step(&mut self, dt_ms: Ms, wear_rate: f64) {
        let dt = dt_ms as f64 / 1000.0;
        let prev = self.speed;
        self.speed = (prev + (dt / self.tau_s) * (self.k * self.duty - prev)).max(0.0);
        self.wear += wear_rate * prev * dt;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub entity_id: EntityId,
    pub quantity: Quantity,
    #[serde(default)]
    pub bias: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    pub period_ms: Ms,
    pub unit: String,
}

/// One reading as emitted by a sensor, in its declared unit.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetrySample {
    pub source: EntityId,
    pub quantity: Quantity,
    pub value: f64,
    pub unit: String,
    pub ts: Ms,
    pub seq: u64,
    pub auth_tag: [u8; 32],
}

impl TelemetrySample {
    pub fn tag_input(&self) -> Vec<u8> {
        sample_tag_input(&self.source, self.quantity, self.value, self.ts, self.seq)
    }

    /// Recomputes the tag with `key` after a field has been modified.
    pub fn resign(&mut self, key: &[u8; 32]) {
        self.auth_tag = compute_tag(key, &self.tag_input());
    }
}

impl Canonical for TelemetrySample {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(self.source.as_str())
            .u8(self.quantity.tag())
            .f64(self.value)
            .str(&self.unit)
            .u64(self.ts)
            .u64(self.seq)
            .raw(&self.auth_tag);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandAction {
    SetDuty(f64),
    SafeStop,
    PowerOff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuatorCommand {
    pub target: EntityId,
    pub action: CommandAction,
    pub issued_by: EntityId,
    pub ts: Ms,
}

impl Canonical for ActuatorCommand {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(self.target.as_str());
        match self.action {
            CommandAction::SetDuty(d) => enc.u8(0).f64(d),
            CommandAction::SafeStop => enc.u8(1),
            CommandAction::PowerOff => enc.u8(2),
        };
        enc.str(self.issued_by.as_str()).u64(self.ts);
    }
}

impl ActuatorCommand {
    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let target = EntityId(dec.str()?);
        let action = match dec.u8()? {
            0 => CommandAction::SetDuty(dec.f64()?),
            1 => CommandAction::SafeStop,
            2 => CommandAction::PowerOff,
            _ => return Err(DecodeError::Invalid("command action")),
        };
        let issued_by = EntityId(dec.str()?);
        let ts = dec.u64()?;
        Ok(Self {
            target,
            action,
            issued_by,
            ts,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    StuckSensor,
    /// Additive drift in the sensor's unit per second since window start.
    Drift {
        rate_per_s: f64,
    },
}

/// Sensor fault active over the closed window `[start_ms, end_ms]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub sensor: EntityId,
    pub kind: FaultKind,
    pub start_ms: Ms,
    pub end_ms: Ms,
}

struct SensorChannel {
    spec: SensorSpec,
    key: [u8; 32],
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    seq: u64,
    next_due: Ms,
    powered: bool,
    faults: Vec<Fault>,
    stuck_value: Option<f64>,
}

pub struct Plant {
    params: PlantParams,
    state: ConveyorState,
    actuator: EntityId,
    actuator_on: bool,
    sensors: Vec<SensorChannel>,
    now: Ms,
}

impl Plant {
    /// Builds the plant. Each sensor draws noise from its own stream
    /// `plant/<id>` and signs with the key registered under its id.
    pub fn new(
        params: PlantParams,
        actuator: EntityId,
        sensors: Vec<SensorSpec>,
        seeds: &SeedTree,
        keys: &KeyStore,
    ) -> Result<Self, PlantError> {
        let duty = params.initial_duty.clamp(0.0, 1.0);
        let speed = params.initial_speed.unwrap_or(params.k * duty).max(0.0);
        let state = ConveyorState {
            duty,
            speed,
            k: params.k,
            tau_s: params.tau_s,
            wear: 0.0,
        };
        let sensors = sensors
            .into_iter()
            .map(|spec| {
                if from_canonical_unit(spec.quantity, &spec.unit, 0.0).is_none() {
                    return Err(PlantError::UnknownUnit(
                        spec.entity_id.clone(),
                        spec.unit.clone(),
                    ));
                }
                let noise = (spec.noise_sigma > 0.0)
                    .then(|| Normal::new(0.0, spec.noise_sigma).expect("finite sigma"));
                Ok(SensorChannel {
                    key: keys.key(spec.entity_id.as_str()),
                    rng: seeds.stream(&format!("plant/{}", spec.entity_id)),
                    noise,
                    seq: 0,
                    next_due: spec.period_ms,
                    powered: true,
                    faults: Vec::new(),
                    stuck_value: None,
                    spec,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            params,
            state,
            actuator,
            actuator_on: true,
            sensors,
            now: 0,
        })
    }

    pub fn now(&self) -> Ms {
        self.now
    }

    pub fn state(&self) -> &ConveyorState {
        &self.state
    }

    pub fn params(&self) -> &PlantParams {
        &self.params
    }

    pub fn actuator(&self) -> &EntityId {
        &self.actuator
    }

    pub fn sensor_specs(&self) -> impl Iterator<Item = &SensorSpec> {
        self.sensors.iter().map(|s| &s.spec)
    }

    pub fn is_powered(&self, id: &EntityId) -> bool {
        if *id == self.actuator {
            return self.actuator_on;
        }
        self.sensors
            .iter()
            .any(|s| s.spec.entity_id == *id && s.powered)
    }

    /// Maintenance performed: wear back to zero.
    pub fn service(&mut self) {
        self.state.wear = 0.0;
    }

    /// Advances the conveyor by `dt` ms and returns samples of every sensor
    /// whose period elapsed.
    pub fn step(&mut self, dt: Ms) -> Vec<TelemetrySample> {
        assert!(dt > 0, "plant step needs dt > 0");
        self.state.euler_step(dt, self.params.wear_rate);
        self.now += dt;
        let now = self.now;
        let truth = self.state;
        let params = &self.params;
        let mut out = Vec::new();
        for s in &mut self.sensors {
            let mut due = false;
            while s.next_due <= now {
                s.next_due += s.spec.period_ms;
                due = true;
            }
            if !due || !s.powered {
                continue;
            }
            let true_si = match s.spec.quantity {
                Quantity::Speed => truth.speed,
                Quantity::Temperature => params.ambient_c + params.heat_per_speed * truth.speed,
                Quantity::Vibration => {
                    params.vibration_per_speed * truth.speed * (1.0 + truth.wear)
                }
            };
            let mut value = from_canonical_unit(s.spec.quantity, &s.spec.unit, true_si)
                .expect("unit checked at construction")
                + s.spec.bias;
            if let Some(n) = &s.noise {
                value += n.sample(&mut s.rng);
            }
            value = s.apply_faults(now, value);
            s.seq += 1;
            let mut sample = TelemetrySample {
                source: s.spec.entity_id.clone(),
                quantity: s.spec.quantity,
                value,
                unit: s.spec.unit.clone(),
                ts: now,
                seq: s.seq,
                auth_tag: [0; 32],
            };
            sample.resign(&s.key);
            out.push(sample);
        }
        out
    }

    pub fn apply_command(
        &mut self,
        cmd: &ActuatorCommand,
        auth: &dyn Authorizer,
    ) -> Result<(), PlantError> {
        let is_actuator = cmd.target == self.actuator;
        let sensor = self
            .sensors
            .iter_mut()
            .find(|s| s.spec.entity_id == cmd.target);
        if !is_actuator && sensor.is_none() {
            return Err(PlantError::UnknownTarget(cmd.target.clone()));
        }
        if !auth.permits(&cmd.issued_by, Action::IssueCommand) {
            return Err(PlantError::UnauthorizedIssuer(cmd.issued_by.clone()));
        }
        match (cmd.action, sensor) {
            (CommandAction::SetDuty(d), _) if !(0.0..=1.0).contains(&d) || d.is_nan() => {
                Err(PlantError::InvalidDuty(d))
            }
            (CommandAction::SetDuty(d), None) => {
                if self.actuator_on {
                    self.state.duty = d;
                }
                Ok(())
            }
            (CommandAction::SafeStop, None) => {
                self.state.duty = 0.0;
                Ok(())
            }
            (CommandAction::PowerOff, None) => {
                self.state.duty = 0.0;
                self.actuator_on = false;
                Ok(())
            }
            (CommandAction::PowerOff, Some(s)) => {
                s.powered = false;
                Ok(())
            }
            (_, Some(_)) => Err(PlantError::InvalidAction(cmd.target.clone())),
        }
    }

    pub fn inject_fault(&mut self, fault: Fault) -> Result<(), PlantError> {
        let s = self
            .sensors
            .iter_mut()
            .find(|s| s.spec.entity_id == fault.sensor)
            .ok_or_else(|| PlantError::UnknownTarget(fault.sensor.clone()))?;
        s.faults.push(fault);
        Ok(())
    }
}

impl SensorChannel {
    fn apply_faults(&mut self, ts: Ms, mut value: f64) -> f64 {
        let mut stuck_active = false;
        for f in &self.faults {
            if ts < f.start_ms || ts > f.end_ms {
                continue;
            }
            match f.kind {
                FaultKind::StuckSensor => stuck_active = true,
                FaultKind::Drift { rate_per_s } => {
                    value += rate_per_s * (ts - f.start_ms) as f64 / 1000.0;
                }
            }
        }
        if stuck_active {
            *self.stuck_value.get_or_insert(value)
        } else {
            self.stuck_value = None;
            value
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::verify_tag;

    struct AllowAll;
    impl Authorizer for AllowAll {
        fn permits(&self, _: &EntityId, _: Action) -> bool {
            true
        }
    }
    struct DenyAll;
    impl Authorizer for DenyAll {
        fn permits(&self, _: &EntityId, _: Action) -> bool {
            false
        }
    }

    fn speed_sensor(id: &str, sigma: f64) -> SensorSpec {
        SensorSpec {
            entity_id: id.into(),
            quantity: Quantity::Speed,
            bias: 0.0,
            noise_sigma: sigma,
            period_ms: 100,
            unit: "m/s".into(),
        }
    }

    fn plant(k: f64, tau: f64, duty: f64, speed: f64, sigma: f64) -> Plant {
        let mut p = PlantParams::new(k, tau);
        p.initial_duty = duty;
        p.initial_speed = Some(speed);
        Plant::new(
            p,
            "conveyor".into(),
            vec![speed_sensor("s1", sigma)],
            &SeedTree::new(1),
            &KeyStore::new(1),
        )
        .unwrap()
    }

    fn cmd(action: CommandAction) -> ActuatorCommand {
        ActuatorCommand {
            target: "conveyor".into(),
            action,
            issued_by: "op".into(),
            ts: 0,
        }
    }

    #[test]
    fn zero_duty_is_fixed_point() {
        let mut p = plant(2.0, 2.0, 0.0, 0.0, 0.0);
        for _ in 0..1000 {
            p.step(10);
        }
        assert_eq!(p.state().speed, 0.0);
    }

    #[test]
    fn converges_to_k_times_duty() {
        let mut p = plant(2.0, 2.0, 0.5, 0.0, 0.0);
        for _ in 0..5000 {
            p.step(10);
        }
        assert!((p.state().speed - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_step_arithmetic() {
        let mut p = plant(2.0, 2.0, 1.0, 0.0, 0.0);
        p.step(100);
        assert!((p.state().speed - 0.1).abs() < 1e-15);
    }

    #[test]
    fn matches_closed_form_after_five_tau() {
        for &(duty, tau) in &[(0.3, 2.0), (1.0, 0.5), (0.75, 4.0)] {
            let mut p = plant(2.0, tau, duty, 0.0, 0.0);
            let dt = 10;
            let steps = (5.0 * tau * 1000.0 / dt as f64) as usize;
            for _ in 0..steps {
                p.step(dt);
            }
            let t = (steps as u64 * dt) as f64 / 1000.0;
            let closed = 2.0 * duty * (1.0 - (-t / tau).exp());
            assert!(
                (p.state().speed - closed).abs() <= 0.01 * closed,
                "{duty} {tau}"
            );
        }
    }

    #[test]
    fn safe_stop_decays_like_exponential() {
        let mut p = plant(2.0, 2.0, 0.5, 1.0, 0.0);
        p.apply_command(&cmd(CommandAction::SafeStop), &AllowAll)
            .unwrap();
        assert_eq!(p.state().duty, 0.0);
        let mut t_ms = 0;
        while t_ms < 6000 {
            p.step(10);
            t_ms += 10;
            let oracle = (-(t_ms as f64) / 2000.0).exp();
            // Euler decay (1 - dt/tau)^n stays within 1% of e^(-t/tau) here.
            assert!((p.state().speed - oracle).abs() <= 0.01 * oracle + 1e-12);
        }
        assert!(p.state().speed < 0.05);
    }

    #[test]
    fn power_off_silences_sensor() {
        let mut p = plant(2.0, 2.0, 0.5, 1.0, 0.01);
        assert_eq!(p.step(100).len(), 1);
        let off = ActuatorCommand {
            target: "s1".into(),
            action: CommandAction::PowerOff,
            issued_by: "ti".into(),
            ts: 100,
        };
        p.apply_command(&off, &AllowAll).unwrap();
        let n: usize = (0..50).map(|_| p.step(100).len()).sum();
        assert_eq!(n, 0);
        assert!(!p.is_powered(&"s1".into()));
    }

    #[test]
    fn command_errors() {
        let mut p = plant(2.0, 2.0, 0.5, 1.0, 0.0);
        assert_eq!(
            p.apply_command(&cmd(CommandAction::SetDuty(1.5)), &AllowAll),
            Err(PlantError::InvalidDuty(1.5))
        );
        assert_eq!(
            p.apply_command(&cmd(CommandAction::SetDuty(0.2)), &DenyAll),
            Err(PlantError::UnauthorizedIssuer("op".into()))
        );
        let mut bad = cmd(CommandAction::SafeStop);
        bad.target = "ghost".into();
        assert_eq!(
            p.apply_command(&bad, &AllowAll),
            Err(PlantError::UnknownTarget("ghost".into()))
        );
        assert_eq!(p.state().duty, 0.5);
    }

    #[test]
    fn seq_is_gapless_and_tags_verify() {
        let keys = KeyStore::new(1);
        let mut p = plant(2.0, 2.0, 0.5, 1.0, 0.01);
        let mut last = 0;
        for _ in 0..200 {
            for s in p.step(50) {
                assert_eq!(s.seq, last + 1);
                last = s.seq;
                assert!(verify_tag(
                    &keys.key(s.source.as_str()),
                    &s.tag_input(),
                    &s.auth_tag
                ));
            }
        }
        assert_eq!(last, 100);
    }

    #[test]
    fn stuck_sensor_holds_value() {
        let mut p = plant(2.0, 2.0, 1.0, 0.0, 0.01);
        p.inject_fault(Fault {
            sensor: "s1".into(),
            kind: FaultKind::StuckSensor,
            start_ms: 1000,
            end_ms: 3000,
        })
        .unwrap();
        let samples: Vec<_> = (0..40).flat_map(|_| p.step(100)).collect();
        let window: Vec<_> = samples
            .iter()
            .filter(|s| (1000..=3000).contains(&s.ts))
            .collect();
        assert!(window.iter().all(|s| s.value == window[0].value));
        assert!(window.windows(2).all(|w| w[0].ts < w[1].ts));
        let after = samples.iter().find(|s| s.ts == 3100).unwrap();
        assert_ne!(after.value, window[0].value);
    }

    #[test]
    fn drift_accumulates_linearly() {
        let mut p = plant(2.0, 2.0, 0.5, 1.0, 0.0);
        p.inject_fault(Fault {
            sensor: "s1".into(),
            kind: FaultKind::Drift { rate_per_s: 0.01 },
            start_ms: 0,
            end_ms: 100_000,
        })
        .unwrap();
        let samples: Vec<_> = (0..1000).flat_map(|_| p.step(100)).collect();
        let last = samples.last().unwrap();
        assert_eq!(last.ts, 100_000);
        assert!((last.value - 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_drift_is_identity() {
        let mut a = plant(2.0, 2.0, 0.5, 1.0, 0.01);
        let mut b = plant(2.0, 2.0, 0.5, 1.0, 0.01);
        b.inject_fault(Fault {
            sensor: "s1".into(),
            kind: FaultKind::Drift { rate_per_s: 0.0 },
            start_ms: 0,
            end_ms: 10_000,
        })
        .unwrap();
        for _ in 0..100 {
            assert_eq!(a.step(100), b.step(100));
        }
    }

    #[test]
    fn unknown_unit_rejected_at_build() {
        let mut s = speed_sensor("s1", 0.0);
        s.unit = "parsec".into();
        let err = Plant::new(
            PlantParams::new(1.0, 1.0),
            "c".into(),
            vec![s],
            &SeedTree::new(0),
            &KeyStore::new(0),
        );
        assert!(matches!(err, Err(PlantError::UnknownUnit(..))));
    }
}
