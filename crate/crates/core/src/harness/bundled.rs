//! Reference scenarios shipped with the crate.

pub const BENIGN: &str = include_str!("../../scenarios/benign.json");
pub const MITM: &str = include_str!("../../scenarios/mitm.json");
pub const REPLAY: &str = include_str!("../../scenarios/replay.json");
pub const SPOOF: &str = include_str!("../../scenarios/spoof.json");
pub const CALIBRATION: &str = include_str!("../../scenarios/calibration.json");
pub const RULE_LIFECYCLE: &str = include_str!("../../scenarios/rule_lifecycle.json");
pub const MAINTENANCE: &str = include_str!("../../scenarios/maintenance.json");

pub const ALL: &[(&str, &str)] = &[
    ("benign", BENIGN),
    ("mitm", MITM),
    ("replay", REPLAY),
    ("spoof", SPOOF),
    ("calibration", CALIBRATION),
    ("rule_lifecycle", RULE_LIFECYCLE),
    ("maintenance", MAINTENANCE),
];

pub fn by_name(name: &str) -> Option<&'static str> {
    ALL.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}
