use twinsec_core::harness::{
    audit, bundled, replay_bytes, run, verify, write_artifacts, HarnessError, ScenarioConfig,
};
use twinsec_core::ledger::{export, EntryKind, Ledger, Payload};
use twinsec_core::rules::{RuleKind, RuleLevel, Severity};
use twinsec_core::twin::{trajectory_to_bytes, TwinError};
use twinsec_core::{ChainStatus, EntityId, SSRule};

fn scenario(text: &str) -> ScenarioConfig {
    ScenarioConfig::from_json(text).unwrap()
}

#[test]
fn benign_run_is_quiet_and_valid() {
    let out = run(&scenario(bundled::BENIGN)).unwrap();
    let r = &out.report;
    assert_eq!(r.frames, 6000);
    assert!(r.alerts.is_empty(), "{:?}", r.alerts);
    assert_eq!(r.false_alarms, 0);
    assert_eq!(r.ledger.chain, ChainStatus::Valid);
    assert!(r.replay.deterministic);
    assert!(
        r.ledger.by_kind["Provenance"] >= 6000 / 50,
        "telemetry anchors missing"
    );
}

#[test]
fn mitm_raises_known_threat_and_stops_conveyor() {
    let out = run(&scenario(bundled::MITM)).unwrap();
    let first = out.report.first_detection(0).unwrap();
    assert_eq!(first.class, "known_threat");
    assert!(first.latency_frames.unwrap() <= 5);
    assert!(out
        .report
        .mitigations
        .iter()
        .any(|m| m.kind.as_str() == "safe_stop" && m.target.as_str() == "motor-1"));
    let trail: Vec<String> = out
        .ledger
        .query_provenance("motor-1")
        .into_iter()
        .map(|p| p.summary)
        .collect();
    assert!(trail
        .iter()
        .any(|s| s.starts_with("mitigation") && s.contains("action=safe_stop")));
    assert!(trail
        .iter()
        .any(|s| s.starts_with("command ") && s.contains("SafeStop")));
    // The twin mirrored the stop, so late predictions sit near zero speed.
    let last = out.frames.last().unwrap();
    assert!(last.predicted["speed"] < 0.01);
}

#[test]
fn runs_are_reproducible() {
    let cfg = scenario(bundled::MITM);
    let a = run(&cfg).unwrap();
    let b = run(&cfg).unwrap();
    assert_eq!(a.report.digest(), b.report.digest());
    assert_eq!(a.log.digest(), b.log.digest());
    assert_eq!(a.ledger.head_hash(), b.ledger.head_hash());
    assert_eq!(a.report.trace_digest, b.report.trace_digest);
}

#[test]
fn attack_windows_echoed_verbatim() {
    for (name, text) in bundled::ALL {
        let cfg = scenario(text);
        let out = run(&cfg).unwrap();
        assert_eq!(out.report.attacks, cfg.attacks, "{name}");
    }
}

#[test]
fn undeclared_device_is_invalid() {
    let mut v: serde_json::Value = serde_json::from_str(bundled::MITM).unwrap();
    v["attacks"][0]["channel"] = "speed-9".into();
    match ScenarioConfig::from_json(&v.to_string()) {
        Err(HarnessError::InvalidScenario { field, .. }) => assert_eq!(field, "attacks[0].channel"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn replay_command_verdicts() {
    let cfg = scenario(bundled::MITM);
    let out = run(&cfg).unwrap();
    let log = out.log.to_bytes();

    let v = replay_bytes(&log, None).unwrap();
    assert!(v.matches(), "{}", v.to_text());
    assert!(v.to_text().starts_with("match frames=600"));

    assert!(matches!(
        replay_bytes(&log[..log.len() - 7], None),
        Err(TwinError::CorruptLog(_))
    ));

    let mut other = cfg.clone();
    other.seed += 1;
    let other_log = run(&other).unwrap().log.to_bytes();
    let traj = trajectory_to_bytes(&out.log.trajectory());
    let v = replay_bytes(&other_log, Some(&traj)).unwrap();
    assert_eq!(v.first_divergence.map(|d| d.0), Some(0), "{}", v.to_text());
    assert!(v.to_text().starts_with("mismatch frame=0"));
}

fn rule(version: u64, author: &str, max: f64, ts: u64) -> SSRule {
    SSRule {
        rule_id: "belt-max".into(),
        version,
        level: RuleLevel::Device,
        kind: RuleKind::Threshold {
            quantity: "speed".into(),
            min: f64::NEG_INFINITY,
            max,
        },
        target: String::new(),
        severity: Severity::Critical,
        author: author.into(),
        effective_ts: ts,
        retired: false,
        draft: false,
    }
}

fn rule_ledger() -> Vec<u8> {
    use std::collections::BTreeSet;
    use twinsec_core::ledger::{EntityKind, EntityRecord};
    use twinsec_core::Action;
    let mut l = Ledger::new();
    for (i, id) in ["alice", "bob"].into_iter().enumerate() {
        l.register_entity(
            EntityRecord {
                entity_id: id.into(),
                kind: EntityKind::Human,
                mac_key: id.into(),
                access: BTreeSet::from([Action::UpdateRule]),
                registered_at: i as u64,
            },
            &EntityId::from("alice"),
            0,
        )
        .unwrap();
    }
    l.seal(0);
    for (v, who, max, ts) in [
        (1, "alice", 1.2, 100),
        (2, "bob", 1.3, 200),
        (3, "alice", 1.1, 300),
    ] {
        l.stage(
            Payload::RuleUpdate(rule(v, who, max, ts)),
            &EntityId::from(who),
            ts,
        )
        .unwrap();
        l.seal(ts);
    }
    export(&l)
}

#[test]
fn audit_prints_rule_lineage() {
    let bytes = rule_ledger();
    let text = audit(&bytes, "belt-max").unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "{text}");
    for (line, (who, v)) in lines.iter().zip([("alice", 1), ("bob", 2), ("alice", 3)]) {
        assert!(
            line.contains(&format!("author={who} version={v} ")),
            "{line}"
        );
        assert!(line.contains(EntryKind::RuleUpdate.as_str()));
    }
    assert_eq!(audit(&bytes, "nobody").unwrap(), "");
}

#[test]
fn audit_refuses_tampered_ledger() {
    let mut bytes = rule_ledger();
    let i = bytes.len() - 40;
    bytes[i] ^= 0x01;
    assert!(matches!(
        audit(&bytes, "belt-max"),
        Err(HarnessError::BrokenChain { .. })
    ));
    assert!(!verify(&bytes).status.is_valid());
    assert!(verify(&rule_ledger())
        .to_text()
        .starts_with("valid blocks=4"));
}

#[test]
fn artifacts_round_trip() {
    let out = run(&scenario(bundled::SPOOF)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = write_artifacts(&out, dir.path()).unwrap();
    let ledger = std::fs::read(&a.ledger).unwrap();
    assert_eq!(verify(&ledger).head_hash, Some(out.ledger.head_hash()));
    let log = std::fs::read(&a.replay_log).unwrap();
    let traj = std::fs::read(&a.trajectory).unwrap();
    assert!(replay_bytes(&log, Some(&traj)).unwrap().matches());
    let report = std::fs::read_to_string(&a.report).unwrap();
    assert!(report.starts_with("{\n  \"scenario_digest\""));
    assert_eq!(report, out.report.to_json() + "\n");
    let evidence = std::fs::read_to_string(&a.evidence).unwrap();
    assert!(evidence.starts_with("alert A-0001"));
    assert!(evidence.contains("tap spoof channel=speed-1 window=20000..40000"));
}

#[test]
fn maintenance_resets_wear() {
    let out = run(&scenario(bundled::MAINTENANCE)).unwrap();
    let r = &out.report;
    assert_eq!(r.alerts.len(), 2);
    assert!(r
        .alerts
        .iter()
        .all(|a| a.source == "wear" && a.state == "resolved"));
    assert_eq!(r.false_alarms, 0);
    assert!(out
        .frames
        .iter()
        .all(|f| f.residual.get("vibration").is_none_or(|r| r.abs() < 0.2)));
}

#[test]
fn calibration_follows_residual_anomaly() {
    let out = run(&scenario(bundled::CALIBRATION)).unwrap();
    let cals = &out.report.calibrations;
    assert!(cals.len() >= 2);
    assert!(cals.iter().all(|c| c.error.is_none()));
    let last = cals.last().unwrap();
    assert!((last.k_hat.unwrap() - 1.25).abs() / 1.25 < 0.05);
    assert!((last.tau_hat.unwrap() - 2.0).abs() / 2.0 < 0.1);
    let versions = out.ledger.query_provenance("conveyor");
    assert_eq!(versions.len(), 1 + cals.len());
}
