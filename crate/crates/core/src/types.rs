//! Identifiers and small value types shared by every module.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec::{Canonical, Encoder};

/// Virtual time in milliseconds.
pub type Ms = u64;

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub String);

impl EntityId {
    pub fn new(s: impl Into<String>) -> Self {
        EntityId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for EntityId {
    fn from(s: &str) -> Self {
        EntityId(s.to_string())
    }
}

impl Canonical for EntityId {
    fn encode(&self, enc: &mut Encoder) {
        enc.str(&self.0);
    }
}

/// Physical quantity measured by a sensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Speed,
    Temperature,
    Vibration,
}

impl Quantity {
    pub fn as_str(self) -> &'static str {
        match self {
            Quantity::Speed => "speed",
            Quantity::Temperature => "temperature",
            Quantity::Vibration => "vibration",
        }
    }

    /// Unit every value of this quantity is normalized to.
    pub fn canonical_unit(self) -> &'static str {
        match self {
            Quantity::Speed => "m/s",
            Quantity::Temperature => "C",
            Quantity::Vibration => "mm/s",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "speed" => Some(Quantity::Speed),
            "temperature" => Some(Quantity::Temperature),
            "vibration" => Some(Quantity::Vibration),
            _ => None,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Quantity::Speed => 0,
            Quantity::Temperature => 1,
            Quantity::Vibration => 2,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Quantity::Speed),
            1 => Some(Quantity::Temperature),
            2 => Some(Quantity::Vibration),
            _ => None,
        }
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Converts `value` expressed in `unit` to the canonical unit of `quantity`.
///
/// Returns `None` for units the quantity does not know.
pub fn to_canonical_unit(quantity: Quantity, unit: &str, value: f64) -> Option<f64> {
    let v = match (quantity, unit) {
        (Quantity::Speed, "m/s") => value,
        (Quantity::Speed, "km/h") => value / 3.6,
        (Quantity::Speed, "mm/s") => value / 1000.0,
        (Quantity::Speed, "ft/s") => value * 0.3048,
        (Quantity::Temperature, "C") => value,
        (Quantity::Temperature, "F") => (value - 32.0) * 5.0 / 9.0,
        (Quantity::Temperature, "K") => value - 273.15,
        (Quantity::Vibration, "mm/s") => value,
        (Quantity::Vibration, "in/s") => value * 25.4,
        _ => return None,
    };
    Some(v)
}

/// Inverse of [`to_canonical_unit`].
pub fn from_canonical_unit(quantity: Quantity, unit: &str, value: f64) -> Option<f64> {
    let v = match (quantity, unit) {
        (Quantity::Speed, "m/s") => value,
        (Quantity::Speed, "km/h") => value * 3.6,
        (Quantity::Speed, "mm/s") => value * 1000.0,
        (Quantity::Speed, "ft/s") => value / 0.3048,
        (Quantity::Temperature, "C") => value,
        (Quantity::Temperature, "F") => value * 9.0 / 5.0 + 32.0,
        (Quantity::Temperature, "K") => value + 273.15,
        (Quantity::Vibration, "mm/s") => value,
        (Quantity::Vibration, "in/s") => value / 25.4,
        _ => return None,
    };
    Some(v)
}

/// Permission bits carried by a registered entity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    EmitData,
    IssueCommand,
    UpdateRule,
    CalibrateModel,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::EmitData => "emit_data",
            Action::IssueCommand => "issue_command",
            Action::UpdateRule => "update_rule",
            Action::CalibrateModel => "calibrate_model",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Action::EmitData => 0,
            Action::IssueCommand => 1,
            Action::UpdateRule => 2,
            Action::CalibrateModel => 3,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Action::EmitData),
            1 => Some(Action::IssueCommand),
            2 => Some(Action::UpdateRule),
            3 => Some(Action::CalibrateModel),
            _ => None,
        }
    }
}

/// Answers "may `entity` perform `action`?".
pub trait Authorizer {
    fn permits(&self, entity: &EntityId, action: Action) -> bool;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fahrenheit_to_celsius() {
        let c = to_canonical_unit(Quantity::Temperature, "F", 77.0).unwrap();
        assert!((c - 25.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_unit() {
        assert_eq!(
            to_canonical_unit(Quantity::Speed, "furlong/fortnight", 1.0),
            None
        );
        assert_eq!(to_canonical_unit(Quantity::Temperature, "m/s", 1.0), None);
    }

    #[test]
    fn conversions_invert() {
        for (q, u) in [
            (Quantity::Speed, "km/h"),
            (Quantity::Speed, "ft/s"),
            (Quantity::Temperature, "F"),
            (Quantity::Temperature, "K"),
            (Quantity::Vibration, "in/s"),
        ] {
            let raw = from_canonical_unit(q, u, 1.25).unwrap();
            let back = to_canonical_unit(q, u, raw).unwrap();
            assert!((back - 1.25).abs() < 1e-12, "{q} {u}");
        }
    }
}
