//! Artifact files and the offline operations over them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{HarnessError, RunOutput};
use crate::codec::Hash32;
use crate::ledger::{import, verify_bytes, ChainStatus, LedgerStats};
use crate::twin::{
    first_divergence, replay, trajectory_digest, trajectory_from_bytes, trajectory_to_bytes,
    ReplayLog, TwinError,
};
use crate::types::Ms;

/// Paths of everything [`write_artifacts`] produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Artifacts {
    pub report: PathBuf,
    pub ledger: PathBuf,
    pub replay_log: PathBuf,
    pub trajectory: PathBuf,
    pub evidence: PathBuf,
}

pub fn write_artifacts(out: &RunOutput, dir: &Path) -> Result<Artifacts, HarnessError> {
    fs::create_dir_all(dir)?;
    let a = Artifacts {
        report: dir.join("report.json"),
        ledger: dir.join("ledger.bin"),
        replay_log: dir.join("replay.log"),
        trajectory: dir.join("trajectory.bin"),
        evidence: dir.join("evidence.txt"),
    };
    fs::write(&a.report, out.report.to_json() + "\n")?;
    fs::write(&a.ledger, crate::ledger::export(&out.ledger))?;
    fs::write(&a.replay_log, out.log.to_bytes())?;
    fs::write(&a.trajectory, trajectory_to_bytes(&out.log.trajectory()))?;
    let text: String = out.evidence.iter().map(|e| e.to_text() + "\n").collect();
    fs::write(&a.evidence, text)?;
    Ok(a)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayVerdict {
    pub frames: usize,
    pub expected: Hash32,
    pub replayed: Hash32,
    /// Index and timestamp of the first frame that differs.
    pub first_divergence: Option<(usize, Option<Ms>)>,
}

impl ReplayVerdict {
    pub fn matches(&self) -> bool {
        self.first_divergence.is_none()
    }

    pub fn to_text(&self) -> String {
        match self.first_divergence {
            None => format!("match frames={} digest={}", self.frames, self.replayed),
            Some((i, ts)) => {
                let ts = ts.map_or("-".to_string(), |t| t.to_string());
                format!(
                    "mismatch frame={i} ts={ts} expected={} replayed={}",
                    self.expected, self.replayed
                )
            }
        }
    }
}

/// Replays a log and compares against `trajectory` when given, otherwise
/// against the trajectory recorded in the log itself.
pub fn replay_bytes(log: &[u8], trajectory: Option<&[u8]>) -> Result<ReplayVerdict, TwinError> {
    let log = ReplayLog::from_bytes(log)?;
    let expected = match trajectory {
        Some(t) => trajectory_from_bytes(t)?,
        None => log.trajectory(),
    };
    let got = replay(&log)?;
    let first_divergence = first_divergence(&expected, &got).map(|i| {
        let ts = got.get(i).or(expected.get(i)).map(|p| p.ts);
        (i, ts)
    });
    Ok(ReplayVerdict {
        frames: got.len(),
        expected: trajectory_digest(&expected),
        replayed: trajectory_digest(&got),
        first_divergence,
    })
}

/// Provenance timeline of `subject`, one line per committed entry in
/// commit order. Unknown subjects give an empty timeline.
pub fn audit(ledger: &[u8], subject: &str) -> Result<String, HarnessError> {
    if let ChainStatus::Broken { index } = verify_bytes(ledger) {
        return Err(HarnessError::BrokenChain { index });
    }
    let ledger = import(ledger)?;
    let mut s = String::new();
    for p in ledger.query_provenance(subject) {
        let version = p.version.map_or("-".to_string(), |v| v.to_string());
        let _ = writeln!(
            s,
            "{} block={} entry={} {} author={} version={} {}",
            p.ts,
            p.at.block,
            p.at.entry,
            p.kind.as_str(),
            p.author,
            version,
            p.summary
        );
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub status: ChainStatus,
    pub head_hash: Option<Hash32>,
    pub stats: Option<LedgerStats>,
}

impl VerifyReport {
    pub fn to_text(&self) -> String {
        match (self.status, &self.stats, &self.head_hash) {
            (ChainStatus::Valid, Some(st), Some(h)) => {
                format!("valid blocks={} entries={} head={h}", st.blocks, st.entries)
            }
            (ChainStatus::Broken { index }, ..) => format!("broken at block {index}"),
            _ => "valid".into(),
        }
    }
}

pub fn verify(ledger: &[u8]) -> VerifyReport {
    let status = verify_bytes(ledger);
    let parsed = status.is_valid().then(|| import(ledger).ok()).flatten();
    VerifyReport {
        status,
        head_hash: parsed.as_ref().map(|l| l.head_hash()),
        stats: parsed.as_ref().map(|l| l.stats()),
    }
}
