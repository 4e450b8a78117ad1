//! Deterministic digital-twin security testbed: a simulated conveyor, a
//! twin kept in sync with it, a hash-chained provenance ledger, and threat
//! intelligence that detects and mitigates scripted channel attacks.

// Negated float comparisons double as NaN rejection in config validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod auth;
pub mod codec;
pub mod harness;
pub mod ledger;
pub mod pipeline;
pub mod plant;
pub mod rules;
pub mod runtime;
pub mod tintel;
pub mod twin;
pub mod types;

pub use attack::{AttackKind, AttackScript};
pub use codec::{Canonical, Hash32};
pub use harness::{run, HarnessError, RunOutput, RunReport, ScenarioConfig};
pub use ledger::{ChainStatus, Ledger, LedgerBlock, LedgerEntry, LedgerError};
pub use pipeline::{FusedFrame, UnifiedRecord};
pub use plant::{ActuatorCommand, PlantParams, TelemetrySample};
pub use rules::{RuleVerdict, SSRule};
pub use tintel::{Alert, MitigationAction};
pub use twin::{ReplayLog, SyncFrame, TwinModel, TwinState};
pub use types::{Action, EntityId, Ms, Quantity};
