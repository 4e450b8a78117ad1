use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{EntityId, Quantity};

/// Names that may appear in a relation: sensor quantities plus the
/// commanded motor duty.
pub const CONTROL_DUTY: &str = "duty";

#[derive(Debug, Error, PartialEq)]
pub enum KnowledgeError {
    #[error("bound for {0} has min >= max")]
    EmptyBound(String),
    #[error("relation references undeclared quantity `{0}`")]
    UndeclaredQuantity(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub min: f64,
    pub max: f64,
}

impl Bound {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub id: EntityId,
    #[serde(default)]
    pub bounds: BTreeMap<Quantity, Bound>,
}

/// `quantity_a ≈ gain * quantity_b + offset` within `tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub quantity_a: String,
    pub quantity_b: String,
    pub gain: f64,
    #[serde(default)]
    pub offset: f64,
    pub tolerance: f64,
}

/// Static description of the plant used by the integrity checks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineeringKnowledge {
    #[serde(default)]
    pub devices: Vec<DeviceConfig>,
    #[serde(default)]
    pub bounds: BTreeMap<Quantity, Bound>,
    /// Allowed `(sender, receiver)` channel pairs.
    #[serde(default)]
    pub topology: Vec<(EntityId, EntityId)>,
    #[serde(default)]
    pub relations: Vec<Relation>,
}

impl EngineeringKnowledge {
    pub fn validate(&self) -> Result<(), KnowledgeError> {
        for (q, b) in &self.bounds {
            if !(b.min < b.max) {
                return Err(KnowledgeError::EmptyBound(q.to_string()));
            }
        }
        for d in &self.devices {
            for (q, b) in &d.bounds {
                if !(b.min < b.max) {
                    return Err(KnowledgeError::EmptyBound(format!("{}/{}", d.id, q)));
                }
            }
        }
        for r in &self.relations {
            for name in [&r.quantity_a, &r.quantity_b] {
                if name != CONTROL_DUTY && Quantity::parse(name).is_none() {
                    return Err(KnowledgeError::UndeclaredQuantity(name.clone()));
                }
            }
        }
        Ok(())
    }

    /// Device-specific bound if declared, else the plant-wide one.
    pub fn bound_for(&self, source: &EntityId, quantity: Quantity) -> Option<Bound> {
        self.devices
            .iter()
            .find(|d| d.id == *source)
            .and_then(|d| d.bounds.get(&quantity).copied())
            .or_else(|| self.bounds.get(&quantity).copied())
    }

    pub fn allows_link(&self, sender: &EntityId, receiver: &EntityId) -> bool {
        self.topology
            .iter()
            .any(|(s, r)| s == sender && r == receiver)
    }
}
