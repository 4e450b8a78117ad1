//! Scenario file: the single input of a run.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::attack::{AttackKind, AttackScript};
use crate::codec::Hash32;
use crate::pipeline::EngineeringKnowledge;
use crate::plant::{Fault, PlantParams, SensorSpec};
use crate::rules::{validate_rule, SSRule};
use crate::tintel::{DetectorConfig, Policy};
use crate::types::{from_canonical_unit, Action, EntityId, Ms};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub horizon_ms: Ms,
    pub cadence_ms: Ms,
    pub devices: Devices,
    pub plant: PlantBlock,
    pub knowledge: EngineeringKnowledge,
    /// Rules are committed at the first sync at or after their
    /// `effective_ts`, in file order, by their author.
    pub rules: Vec<SSRule>,
    pub detector: DetectorBlock,
    pub policy: PolicyBlock,
    pub attacks: Vec<AttackScript>,
    pub aux: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Devices {
    /// First registered entity; registers every other one.
    pub operator: EntityId,
    pub twin: EntityId,
    pub ti: EntityId,
    pub actuator: EntityId,
    #[serde(default)]
    pub humans: Vec<HumanSpec>,
    pub sensors: Vec<SensorSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumanSpec {
    pub id: EntityId,
    pub access: BTreeSet<Action>,
}

fn default_step() -> Ms {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantBlock {
    #[serde(flatten)]
    pub params: PlantParams,
    #[serde(default = "default_step")]
    pub step_ms: Ms,
    /// Operator set-points, applied right after the sync at `at_ms`.
    #[serde(default)]
    pub duty_schedule: Vec<DutyStep>,
    #[serde(default)]
    pub faults: Vec<Fault>,
    /// Wear level at which the twin requests maintenance.
    #[serde(default)]
    pub wear_limit: Option<f64>,
    /// Initial twin parameters when they differ from the plant truth.
    #[serde(default)]
    pub twin_model: Option<ModelOverride>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DutyStep {
    pub at_ms: Ms,
    pub duty: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverride {
    #[serde(default)]
    pub k_hat: Option<f64>,
    #[serde(default)]
    pub tau_hat: Option<f64>,
}

fn default_max_aoi() -> Ms {
    500
}
fn default_eps() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorBlock {
    #[serde(flatten)]
    pub ewma: DetectorConfig,
    /// Records older than this at their sync are refused as stale.
    #[serde(default = "default_max_aoi")]
    pub max_aoi_ms: Ms,
    /// Cross-validation tolerance per quantity.
    #[serde(default)]
    pub cross_eps: BTreeMap<String, f64>,
    #[serde(default = "default_eps")]
    pub default_eps: f64,
}

fn default_min_frames() -> usize {
    crate::twin::DEFAULT_MIN_FRAMES
}
fn default_anchor() -> u64 {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyBlock {
    #[serde(default)]
    pub actions: Policy,
    /// Scripted operator approvals of envelope rule proposals.
    #[serde(default)]
    pub approvals: Vec<Approval>,
    #[serde(default)]
    pub calibrate_at_ms: Vec<Ms>,
    #[serde(default = "default_min_frames")]
    pub calibration_min_frames: usize,
    /// A telemetry digest is anchored on the ledger every this many frames.
    #[serde(default = "default_anchor")]
    pub anchor_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Approval {
    pub at_ms: Ms,
    pub author: EntityId,
    pub quantity: String,
    pub kappa: f64,
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> HarnessError {
    HarnessError::InvalidScenario {
        field: field.into(),
        reason: reason.into(),
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| invalid("<file>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the serialized configuration.
    pub fn digest(&self) -> Hash32 {
        Hash32::of(&serde_json::to_vec(self).expect("scenario serializes"))
    }

    /// Every declared entity with the permissions it is registered with.
    pub fn roster(&self) -> BTreeMap<EntityId, BTreeSet<Action>> {
        let d = &self.devices;
        let mut r = BTreeMap::new();
        r.insert(
            d.operator.clone(),
            BTreeSet::from([
                Action::IssueCommand,
                Action::UpdateRule,
                Action::CalibrateModel,
            ]),
        );
        r.insert(d.twin.clone(), BTreeSet::from([Action::CalibrateModel]));
        r.insert(d.ti.clone(), BTreeSet::from([Action::IssueCommand]));
        r.insert(d.actuator.clone(), BTreeSet::new());
        for h in &d.humans {
            r.insert(h.id.clone(), h.access.clone());
        }
        for s in &d.sensors {
            r.insert(s.entity_id.clone(), BTreeSet::from([Action::EmitData]));
        }
        r
    }

    /// Checks roster consistency, windows and every rule; the error names
    /// the first failing field.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.cadence_ms == 0 {
            return Err(invalid("cadence_ms", "must be > 0"));
        }
        if self.horizon_ms < self.cadence_ms {
            return Err(invalid("horizon_ms", "shorter than one sync cadence"));
        }

        let d = &self.devices;
        let mut ids = BTreeSet::new();
        let fixed = [
            ("devices.operator", &d.operator),
            ("devices.twin", &d.twin),
            ("devices.ti", &d.ti),
            ("devices.actuator", &d.actuator),
        ];
        let humans = d
            .humans
            .iter()
            .enumerate()
            .map(|(i, h)| (format!("devices.humans[{i}].id"), &h.id));
        let sensors = d
            .sensors
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("devices.sensors[{i}].entity_id"), &s.entity_id));
        for (field, id) in fixed
            .into_iter()
            .map(|(f, id)| (f.to_string(), id))
            .chain(humans)
            .chain(sensors)
        {
            if id.as_str().is_empty() {
                return Err(invalid(field, "empty id"));
            }
            if !ids.insert(id.clone()) {
                return Err(invalid(field, format!("duplicate entity `{id}`")));
            }
        }
        if d.sensors.is_empty() {
            return Err(invalid("devices.sensors", "no sensors declared"));
        }
        for (i, s) in d.sensors.iter().enumerate() {
            if s.period_ms == 0 {
                return Err(invalid(
                    format!("devices.sensors[{i}].period_ms"),
                    "must be > 0",
                ));
            }
            if from_canonical_unit(s.quantity, &s.unit, 0.0).is_none() {
                return Err(invalid(
                    format!("devices.sensors[{i}].unit"),
                    format!("`{}` is not a unit of {}", s.unit, s.quantity),
                ));
            }
            if !(s.noise_sigma >= 0.0) {
                return Err(invalid(
                    format!("devices.sensors[{i}].noise_sigma"),
                    "must be >= 0",
                ));
            }
        }
        let sensor_ids: BTreeSet<&EntityId> = d.sensors.iter().map(|s| &s.entity_id).collect();

        let p = &self.plant;
        if !(p.params.k > 0.0) {
            return Err(invalid("plant.k", "must be > 0"));
        }
        if !(p.params.tau_s > 0.0) {
            return Err(invalid("plant.tau_s", "must be > 0"));
        }
        if p.step_ms == 0 || !self.cadence_ms.is_multiple_of(p.step_ms) {
            return Err(invalid("plant.step_ms", "must divide cadence_ms"));
        }
        // Explicit Euler stays accurate only for steps well below the lag.
        if p.step_ms as f64 / 1000.0 > p.params.tau_s / 10.0 {
            return Err(invalid("plant.step_ms", "must be <= tau_s / 10"));
        }
        for (i, s) in p.duty_schedule.iter().enumerate() {
            if !(0.0..=1.0).contains(&s.duty) {
                return Err(invalid(
                    format!("plant.duty_schedule[{i}].duty"),
                    "outside [0, 1]",
                ));
            }
            if s.at_ms % self.cadence_ms != 0 || s.at_ms > self.horizon_ms {
                return Err(invalid(
                    format!("plant.duty_schedule[{i}].at_ms"),
                    "must be a sync time within the horizon",
                ));
            }
        }
        for (i, f) in p.faults.iter().enumerate() {
            if !sensor_ids.contains(&f.sensor) {
                return Err(invalid(
                    format!("plant.faults[{i}].sensor"),
                    format!("undeclared sensor `{}`", f.sensor),
                ));
            }
            if f.start_ms > f.end_ms || f.end_ms > self.horizon_ms {
                return Err(invalid(
                    format!("plant.faults[{i}].end_ms"),
                    "window outside horizon",
                ));
            }
        }
        if let Some(m) = p.twin_model {
            if m.k_hat.is_some_and(|k| !(k > 0.0)) || m.tau_hat.is_some_and(|t| !(t > 0.0)) {
                return Err(invalid("plant.twin_model", "parameters must be > 0"));
            }
        }

        self.knowledge
            .validate()
            .map_err(|e| invalid("knowledge", e.to_string()))?;
        for (i, (a, b)) in self.knowledge.topology.iter().enumerate() {
            for e in [a, b] {
                if !ids.contains(e) {
                    return Err(invalid(
                        format!("knowledge.topology[{i}]"),
                        format!("undeclared entity `{e}`"),
                    ));
                }
            }
        }
        for (i, dev) in self.knowledge.devices.iter().enumerate() {
            if !ids.contains(&dev.id) {
                return Err(invalid(
                    format!("knowledge.devices[{i}].id"),
                    format!("undeclared entity `{}`", dev.id),
                ));
            }
        }

        let roster = self.roster();
        for (i, r) in self.rules.iter().enumerate() {
            validate_rule(r).map_err(|e| invalid(format!("rules[{i}]"), e.to_string()))?;
            if r.draft {
                return Err(invalid(
                    format!("rules[{i}].draft"),
                    "drafts cannot be committed",
                ));
            }
            if !roster
                .get(&r.author)
                .is_some_and(|a| a.contains(&Action::UpdateRule))
            {
                return Err(invalid(
                    format!("rules[{i}].author"),
                    format!("`{}` is not a declared entity with update_rule", r.author),
                ));
            }
            if r.effective_ts > self.horizon_ms {
                return Err(invalid(
                    format!("rules[{i}].effective_ts"),
                    "after the horizon",
                ));
            }
        }

        self.detector
            .ewma
            .validate()
            .map_err(|e| invalid("detector", e))?;
        if self.detector.max_aoi_ms == 0 {
            return Err(invalid("detector.max_aoi_ms", "must be > 0"));
        }

        let pol = &self.policy;
        for (i, a) in pol.approvals.iter().enumerate() {
            if !roster
                .get(&a.author)
                .is_some_and(|x| x.contains(&Action::UpdateRule))
            {
                return Err(invalid(
                    format!("policy.approvals[{i}].author"),
                    format!("`{}` is not a declared entity with update_rule", a.author),
                ));
            }
            if a.at_ms % self.cadence_ms != 0 || a.at_ms > self.horizon_ms {
                return Err(invalid(
                    format!("policy.approvals[{i}].at_ms"),
                    "must be a sync time within the horizon",
                ));
            }
            if !(a.kappa > 0.0) {
                return Err(invalid(
                    format!("policy.approvals[{i}].kappa"),
                    "must be > 0",
                ));
            }
        }
        for (i, t) in pol.calibrate_at_ms.iter().enumerate() {
            if t % self.cadence_ms != 0 || *t > self.horizon_ms {
                return Err(invalid(
                    format!("policy.calibrate_at_ms[{i}]"),
                    "must be a sync time within the horizon",
                ));
            }
        }
        if pol.anchor_every == 0 {
            return Err(invalid("policy.anchor_every", "must be > 0"));
        }

        for (i, a) in self.attacks.iter().enumerate() {
            if !sensor_ids.contains(&EntityId::new(a.channel.clone())) {
                return Err(invalid(
                    format!("attacks[{i}].channel"),
                    format!("undeclared channel `{}`", a.channel),
                ));
            }
            if a.start_ms > self.horizon_ms {
                return Err(invalid(
                    format!("attacks[{i}].start_ms"),
                    "after the horizon",
                ));
            }
            if let Some(end) = a.end_ms {
                if end <= a.start_ms || end > self.horizon_ms {
                    return Err(invalid(
                        format!("attacks[{i}].end_ms"),
                        "window outside horizon",
                    ));
                }
            }
            match &a.kind {
                AttackKind::Scale { factor, .. } if !factor.is_finite() => {
                    return Err(invalid(format!("attacks[{i}].factor"), "must be finite"));
                }
                AttackKind::Replay {
                    capture_start_ms,
                    capture_end_ms,
                } if capture_end_ms <= capture_start_ms || *capture_end_ms > a.start_ms => {
                    return Err(invalid(
                        format!("attacks[{i}].capture_end_ms"),
                        "capture window must be non-empty and end before the attack",
                    ));
                }
                AttackKind::Spoof { source, .. } if source.as_str().is_empty() => {
                    return Err(invalid(format!("attacks[{i}].source"), "empty id"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::bundled;

    fn benign() -> ScenarioConfig {
        ScenarioConfig::from_json(bundled::BENIGN).unwrap()
    }

    fn field_of(cfg: &ScenarioConfig) -> String {
        match cfg.validate() {
            Err(HarnessError::InvalidScenario { field, .. }) => field,
            other => panic!("expected InvalidScenario, got {other:?}"),
        }
    }

    #[test]
    fn bundled_scenarios_validate() {
        for (name, text) in bundled::ALL {
            ScenarioConfig::from_json(text).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn top_level_keys_are_exact() {
        let mut v: serde_json::Value = serde_json::from_str(bundled::BENIGN).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(
            keys.iter().copied().collect::<BTreeSet<_>>(),
            BTreeSet::from([
                "seed",
                "horizon_ms",
                "cadence_ms",
                "devices",
                "plant",
                "knowledge",
                "rules",
                "detector",
                "policy",
                "attacks",
                "aux"
            ])
        );
        v.as_object_mut().unwrap().insert("extra".into(), 1.into());
        assert!(ScenarioConfig::from_json(&v.to_string()).is_err());
        v.as_object_mut().unwrap().remove("extra");
        v.as_object_mut().unwrap().remove("aux");
        assert!(ScenarioConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn undeclared_device_is_rejected() {
        let mut cfg = benign();
        cfg.attacks.push(AttackScript {
            channel: "ghost-9".into(),
            start_ms: 0,
            end_ms: None,
            kind: AttackKind::Drop,
        });
        assert_eq!(field_of(&cfg), "attacks[0].channel");

        let mut cfg = benign();
        cfg.rules[0].author = "nobody".into();
        assert_eq!(field_of(&cfg), "rules[0].author");
    }

    #[test]
    fn windows_must_fit_horizon() {
        let mut cfg = benign();
        cfg.attacks.push(AttackScript {
            channel: cfg.devices.sensors[0].entity_id.0.clone(),
            start_ms: 10,
            end_ms: Some(cfg.horizon_ms + 1),
            kind: AttackKind::Drop,
        });
        assert_eq!(field_of(&cfg), "attacks[0].end_ms");
    }

    #[test]
    fn first_failing_field_wins() {
        let mut cfg = benign();
        cfg.plant.step_ms = 7;
        cfg.detector.ewma.m = 9;
        assert_eq!(field_of(&cfg), "plant.step_ms");
        cfg.plant.step_ms = 10;
        assert_eq!(field_of(&cfg), "detector");
    }

    #[test]
    fn euler_step_bounded_by_lag() {
        let mut cfg = benign();
        cfg.plant.params.tau_s = 0.05;
        assert_eq!(field_of(&cfg), "plant.step_ms");
        cfg.plant.params.tau_s = 0.1;
        cfg.validate().unwrap();
    }

    #[test]
    fn digest_tracks_content() {
        let a = benign();
        let mut b = benign();
        assert_eq!(a.digest(), b.digest());
        b.seed += 1;
        assert_ne!(a.digest(), b.digest());
    }
}
