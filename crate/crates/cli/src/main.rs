use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use twinsec_core::harness::{self, audit, replay_bytes, verify, write_artifacts, HarnessError};
use twinsec_core::ScenarioConfig;

#[derive(Parser)]
#[command(name = "twinsec", version, about = "Digital-twin security testbed")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write report, ledger, replay log and evidence.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Replay a log and check the trajectory is reproduced bit for bit.
    Replay {
        log: PathBuf,
        /// Compare against this trajectory file instead of the log's own.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Print the provenance timeline of one subject.
    Audit { ledger: PathBuf, subject: String },
    /// Check the ledger's hash chain.
    Verify { ledger: PathBuf },
}

fn read(path: &PathBuf) -> anyhow::Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn main() -> ExitCode {
    match exec(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn exec(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.cmd {
        Cmd::Run { scenario, out } => {
            let text = fs::read_to_string(&scenario)
                .with_context(|| format!("reading {}", scenario.display()))?;
            let cfg = ScenarioConfig::from_json(&text)?;
            let output = harness::run(&cfg)?;
            let paths = write_artifacts(&output, &out)?;
            let r = &output.report;
            println!(
                "scenario={} frames={} alerts={} false_alarms={} blocks={} chain={} deterministic={}",
                r.scenario_digest,
                r.frames,
                r.alerts.len(),
                r.false_alarms,
                r.ledger.blocks,
                if r.ledger.chain.is_valid() { "valid" } else { "broken" },
                r.replay.deterministic
            );
            for a in &r.alerts {
                let latency = a.latency_frames.map_or("-".to_string(), |l| l.to_string());
                println!(
                    "alert {} ts={} {}:{} subject={} state={} latency_frames={latency}",
                    a.alert_id, a.detection_ms, a.class, a.source, a.subject, a.state
                );
            }
            println!("report {}", paths.report.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Replay { log, trajectory } => {
            let log = read(&log)?;
            let traj = trajectory.as_ref().map(read).transpose()?;
            let v = replay_bytes(&log, traj.as_deref())?;
            println!("{}", v.to_text());
            Ok(if v.matches() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Cmd::Audit { ledger, subject } => match audit(&read(&ledger)?, &subject) {
            Ok(text) => {
                print!("{text}");
                Ok(ExitCode::SUCCESS)
            }
            Err(e @ HarnessError::BrokenChain { .. }) => {
                eprintln!("error: {e}");
                Ok(ExitCode::from(1))
            }
            Err(e) => Err(e.into()),
        },
        Cmd::Verify { ledger } => {
            let v = verify(&read(&ledger)?);
            println!("{}", v.to_text());
            Ok(if v.status.is_valid() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}
