//! Least-squares re-estimation of the conveyor gain and lag.
//!
//! Over one sync interval of `n` model steps with constant duty `u`, the
//! discretized model is exactly `s' = a·s + b·u` with `a = (1 - h/τ)^n` and
//! `b = (1 - a)·k`, so `(a, b)` fitted on consecutive frames give back
//! `k = b / (1 - a)` and `τ = h / (1 - a^(1/n))`.

use nalgebra::{DMatrix, DVector};

use super::{SyncFrame, Twin, TwinError, TwinModel};
use crate::ledger::{Ledger, ModelUpdate, Payload};
use crate::types::{EntityId, Ms};

pub const DEFAULT_MIN_FRAMES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fit {
    pub a: f64,
    pub b: f64,
    pub k_hat: f64,
    pub tau_hat: f64,
    pub pairs: usize,
}

/// Fits `(k, τ)` on consecutive frames that observe speed and are one
/// interval apart.
pub fn fit(frames: &[SyncFrame], step_ms: Ms, min_n: usize) -> Result<Fit, TwinError> {
    if frames.len() < min_n.max(2) {
        return Err(TwinError::InsufficientData {
            have: frames.len(),
            need: min_n.max(2),
        });
    }
    let interval = frames[1].ts - frames[0].ts;
    let rows: Vec<(f64, f64, f64)> = frames
        .windows(2)
        .filter(|w| w[1].ts - w[0].ts == interval)
        .filter_map(|w| {
            let prev = w[0].observed.value("speed")?;
            let next = w[1].observed.value("speed")?;
            Some((prev, w[1].duty, next))
        })
        .collect();
    if rows.len() < 2 {
        return Err(TwinError::InsufficientData {
            have: rows.len(),
            need: 2,
        });
    }
    let first = rows[0].1;
    if rows.iter().all(|r| r.1 == first) {
        return Err(TwinError::PoorExcitation);
    }

    let x = DMatrix::from_fn(
        rows.len(),
        2,
        |i, j| if j == 0 { rows[i].0 } else { rows[i].1 },
    );
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.2));
    let sol = x
        .svd(true, true)
        .solve(&y, f64::EPSILON)
        .map_err(|_| TwinError::PoorExcitation)?;
    let (a, b) = (sol[0], sol[1]);
    if !(a > 0.0 && a < 1.0) {
        return Err(TwinError::DegenerateFit { a });
    }
    let n = (interval as f64 / step_ms.max(1) as f64).max(1.0);
    let h = step_ms as f64 / 1000.0;
    Ok(Fit {
        a,
        b,
        k_hat: b / (1.0 - a),
        tau_hat: h / (1.0 - a.powf(1.0 / n)),
        pairs: rows.len(),
    })
}

impl Twin {
    /// Re-fits the model on the retained history. The new version is
    /// committed to the ledger before the twin switches to it; the twin
    /// state is re-anchored to the last observed speed.
    pub fn calibrate(
        &mut self,
        min_n: usize,
        ledger: &mut Ledger,
        author: &EntityId,
        ts: Ms,
    ) -> Result<TwinModel, TwinError> {
        let old = self.model.clone().ok_or(TwinError::UninitializedModel)?;
        let frames: Vec<SyncFrame> = self.history.iter().cloned().collect();
        let f = fit(&frames, old.step_ms, min_n)?;
        let new = TwinModel {
            k_hat: f.k_hat,
            tau_hat: f.tau_hat,
            model_version: old.model_version + 1,
            ..old.clone()
        };
        ledger
            .stage(
                Payload::ModelUpdate(ModelUpdate {
                    model_id: old.model_id.clone(),
                    old_version: old.model_version,
                    new_version: new.model_version,
                    old_digest: old.params_digest(),
                    new_digest: new.params_digest(),
                    k_hat: f.k_hat,
                    tau_hat: f.tau_hat,
                    frames: frames.len() as u64,
                }),
                author,
                ts,
            )
            .map_err(|e| TwinError::Ledger(e.to_string()))?;
        ledger.seal(ts);

        let mut state = self.state;
        if let Some(s) = frames.last().and_then(|f| f.observed.value("speed")) {
            state.speed = s;
        }
        self.install(new.clone(), state);
        Ok(new)
    }
}
