//! Replay log: header, ordered records and a trailing SHA-256 digest over
//! everything before it.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{SyncFrame, Twin, TwinError, TwinModel, TwinState};
use crate::codec::{Canonical, DecodeError, Decoder, Encoder, Hash32};
use crate::plant::ActuatorCommand;
use crate::types::{EntityId, Ms};

pub const REPLAY_MAGIC: &[u8; 8] = b"TSRPLOG1";

#[derive(Debug, Clone, PartialEq)]
pub enum LogRecord {
    Frame(SyncFrame),
    Command(ActuatorCommand),
    Model { model: TwinModel, state: TwinState },
    Service { ts: Ms },
}

impl Canonical for LogRecord {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            LogRecord::Frame(f) => {
                enc.u8(0);
                f.encode(enc);
            }
            LogRecord::Command(c) => {
                enc.u8(1);
                c.encode(enc);
            }
            LogRecord::Model { model, state } => {
                enc.u8(2);
                model.encode(enc);
                state.encode(enc);
            }
            LogRecord::Service { ts } => {
                enc.u8(3).u64(*ts);
            }
        }
    }
}

impl LogRecord {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(match dec.u8()? {
            0 => LogRecord::Frame(SyncFrame::decode(dec)?),
            1 => LogRecord::Command(ActuatorCommand::decode(dec)?),
            2 => LogRecord::Model {
                model: TwinModel::decode(dec)?,
                state: TwinState::decode(dec)?,
            },
            3 => LogRecord::Service { ts: dec.u64()? },
            _ => return Err(DecodeError::Invalid("log record tag")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayLog {
    pub scenario_digest: Hash32,
    pub seed: u64,
    pub records: Vec<LogRecord>,
}

/// Predicted state and residuals at one sync frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub ts: Ms,
    pub model_version: u64,
    pub predicted: BTreeMap<String, f64>,
    pub residual: BTreeMap<String, f64>,
}

impl From<&SyncFrame> for TrajectoryPoint {
    fn from(f: &SyncFrame) -> Self {
        Self {
            ts: f.ts,
            model_version: f.model_version,
            predicted: f.predicted.clone(),
            residual: f.residual.clone(),
        }
    }
}

impl Canonical for TrajectoryPoint {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.ts).u64(self.model_version);
        for m in [&self.predicted, &self.residual] {
            enc.u32(m.len() as u32);
            for (k, v) in m {
                enc.str(k).f64(*v);
            }
        }
    }
}

impl TrajectoryPoint {
    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        let ts = dec.u64()?;
        let model_version = dec.u64()?;
        let mut maps = [BTreeMap::new(), BTreeMap::new()];
        for m in &mut maps {
            for _ in 0..dec.u32()? {
                let k = dec.str()?;
                m.insert(k, dec.f64()?);
            }
        }
        let [predicted, residual] = maps;
        Ok(Self {
            ts,
            model_version,
            predicted,
            residual,
        })
    }
}

fn encode_points(points: &[TrajectoryPoint]) -> Encoder {
    let mut enc = Encoder::new();
    enc.u32(points.len() as u32);
    for p in points {
        p.encode(&mut enc);
    }
    enc
}

pub fn trajectory_digest(points: &[TrajectoryPoint]) -> Hash32 {
    Hash32::of(&encode_points(points).finish())
}

pub const TRAJECTORY_MAGIC: &[u8; 8] = b"TSTRAJ01";

/// Standalone trajectory file: magic, point count, points.
pub fn trajectory_to_bytes(points: &[TrajectoryPoint]) -> Vec<u8> {
    let mut out = TRAJECTORY_MAGIC.to_vec();
    out.extend(encode_points(points).finish());
    out
}

pub fn trajectory_from_bytes(bytes: &[u8]) -> Result<Vec<TrajectoryPoint>, TwinError> {
    let corrupt = |why: String| TwinError::CorruptLog(why);
    let body = bytes
        .strip_prefix(TRAJECTORY_MAGIC.as_slice())
        .ok_or_else(|| corrupt("bad trajectory magic".into()))?;
    let mut dec = Decoder::new(body);
    let n = dec.u32().map_err(|e| corrupt(e.to_string()))?;
    let mut points = Vec::new();
    for _ in 0..n {
        points.push(TrajectoryPoint::decode(&mut dec).map_err(|e| corrupt(e.to_string()))?);
    }
    dec.finish().map_err(|e| corrupt(e.to_string()))?;
    Ok(points)
}

/// Index of the first point where `a` and `b` differ bitwise, or the
/// shorter length when one is a prefix of the other.
pub fn first_divergence(a: &[TrajectoryPoint], b: &[TrajectoryPoint]) -> Option<usize> {
    let same = |x: &TrajectoryPoint, y: &TrajectoryPoint| x.to_canonical() == y.to_canonical();
    match a.iter().zip(b).position(|(x, y)| !same(x, y)) {
        Some(i) => Some(i),
        None if a.len() != b.len() => Some(a.len().min(b.len())),
        None => None,
    }
}

impl ReplayLog {
    pub fn new(scenario_digest: Hash32, seed: u64) -> Self {
        Self {
            scenario_digest,
            seed,
            records: Vec::new(),
        }
    }

    fn body(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.raw(REPLAY_MAGIC)
            .hash(&self.scenario_digest)
            .u64(self.seed)
            .u32(self.records.len() as u32);
        for r in &self.records {
            r.encode(&mut enc);
        }
        enc.finish()
    }

    /// Digest covering the header and every record.
    pub fn digest(&self) -> Hash32 {
        Hash32::of(&self.body())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = self.body();
        let d = Hash32::of(&body);
        body.extend_from_slice(&d.0);
        body
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TwinError> {
        let corrupt = |why: &str| TwinError::CorruptLog(why.to_string());
        if bytes.len() < REPLAY_MAGIC.len() + 32 {
            return Err(corrupt("too short"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Hash32::of(body).0 != trailer {
            return Err(corrupt("digest mismatch"));
        }
        if &body[..REPLAY_MAGIC.len()] != REPLAY_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut dec = Decoder::new(&body[REPLAY_MAGIC.len()..]);
        let parse = |dec: &mut Decoder<'_>| -> Result<Self, DecodeError> {
            let scenario_digest = dec.hash()?;
            let seed = dec.u64()?;
            let n = dec.u32()?;
            let mut records = Vec::new();
            for _ in 0..n {
                records.push(LogRecord::decode(dec)?);
            }
            Ok(Self {
                scenario_digest,
                seed,
                records,
            })
        };
        let log = parse(&mut dec).map_err(|e| corrupt(&e.to_string()))?;
        dec.finish().map_err(|e| corrupt(&e.to_string()))?;
        let mut last = None;
        for f in log.frames() {
            if last.is_some_and(|t| f.ts <= t) {
                return Err(corrupt("frames out of order"));
            }
            last = Some(f.ts);
        }
        Ok(log)
    }

    pub fn frames(&self) -> impl Iterator<Item = &SyncFrame> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Frame(f) => Some(f),
            _ => None,
        })
    }

    /// The trajectory as it was recorded.
    pub fn trajectory(&self) -> Vec<TrajectoryPoint> {
        self.frames().map(TrajectoryPoint::from).collect()
    }
}

/// Feeds the recorded inputs and observations to a fresh twin and returns
/// the trajectory it predicts.
pub fn replay(log: &ReplayLog) -> Result<Vec<TrajectoryPoint>, TwinError> {
    let mut twin = Twin::new(EntityId::from("replay"), log.scenario_digest, log.seed);
    let mut out = Vec::new();
    for r in &log.records {
        match r {
            LogRecord::Frame(f) => out.push(TrajectoryPoint::from(&twin.sync(f.observed.clone())?)),
            LogRecord::Command(c) => twin.observe_command(c),
            LogRecord::Model { model, state } => twin.install(model.clone(), *state),
            LogRecord::Service { ts } => twin.observe_service(*ts),
        }
    }
    Ok(out)
}
