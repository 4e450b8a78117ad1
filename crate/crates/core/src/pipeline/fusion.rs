use std::collections::BTreeMap;

use super::integrity::cross_validate;
use super::{Estimate, FusedFrame, RecordRef, UnifiedRecord};
use crate::types::{EntityId, Ms};

#[derive(Debug, Clone, Default)]
pub struct FusionConfig {
    /// Declared noise standard deviation per source, in SI units.
    pub sigmas: BTreeMap<EntityId, f64>,
    /// Cross-validation tolerance per quantity name; `default_eps` otherwise.
    pub eps: BTreeMap<String, f64>,
    pub default_eps: f64,
}

/// Inverse-variance weighted mean. Zero-variance sources dominate with
/// equal weights among themselves; unknown sigmas count as zero.
pub fn inverse_variance_mean(values: &[(f64, f64)]) -> f64 {
    let exact: Vec<f64> = values
        .iter()
        .filter(|(_, s)| *s <= 0.0)
        .map(|(v, _)| *v)
        .collect();
    if !exact.is_empty() {
        return exact.iter().sum::<f64>() / exact.len() as f64;
    }
    let (num, den) = values.iter().fold((0.0, 0.0), |(n, d), (v, s)| {
        let w = 1.0 / (s * s);
        (n + w * v, d + w)
    });
    // Clamp away rounding so the estimate never leaves the hull of inputs.
    let lo = values.iter().map(|v| v.0).fold(f64::INFINITY, f64::min);
    let hi = values.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max);
    (num / den).clamp(lo, hi)
}

/// Fuses records with `ts` in `(end - window, end]` into one frame.
///
/// The newest record of each source contributes. `aux` is attached as-is.
pub fn fuse(
    end: Ms,
    window: Ms,
    records: &[UnifiedRecord],
    aux: &BTreeMap<String, String>,
    cfg: &FusionConfig,
) -> FusedFrame {
    let start = end.saturating_sub(window);
    let mut latest: BTreeMap<(String, EntityId), &UnifiedRecord> = BTreeMap::new();
    for r in records {
        if (window > 0 && r.ts <= start) || r.ts > end {
            continue;
        }
        let key = (r.quantity.as_str().to_string(), r.source.clone());
        match latest.get(&key) {
            Some(prev) if prev.ts >= r.ts => {}
            _ => {
                latest.insert(key, r);
            }
        }
    }

    let mut by_quantity: BTreeMap<String, Vec<&UnifiedRecord>> = BTreeMap::new();
    for ((q, _), r) in latest {
        by_quantity.entry(q).or_default().push(r);
    }

    let mut values = BTreeMap::new();
    for (q, recs) in by_quantity {
        let pairs: Vec<(f64, f64)> = recs
            .iter()
            .map(|r| {
                (
                    r.value_si,
                    cfg.sigmas.get(&r.source).copied().unwrap_or(0.0),
                )
            })
            .collect();
        let readings: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let eps = cfg.eps.get(&q).copied().unwrap_or(cfg.default_eps);
        let cv = cross_validate(&readings, eps);
        let sources = recs
            .iter()
            .zip(&cv.flags)
            .map(|(r, &flagged)| RecordRef {
                source: r.source.clone(),
                seq: r.seq,
                ts: r.ts,
                imputed: r.quality.contains(super::Quality::IMPUTED),
                flagged,
            })
            .collect();
        values.insert(
            q,
            Estimate {
                estimate: inverse_variance_mean(&pairs),
                confidence: cv.confidence,
                sources,
            },
        );
    }

    FusedFrame {
        ts: end,
        values,
        aux: aux.clone(),
        twin_inputs: BTreeMap::new(),
    }
}

impl FusedFrame {
    /// Merges sub-twin frames under namespaced keys `"<ns>/<quantity>"`.
    pub fn compose(ts: Ms, children: &[(&str, &FusedFrame)]) -> FusedFrame {
        let mut out = FusedFrame {
            ts,
            ..Default::default()
        };
        for (ns, child) in children {
            for (q, e) in &child.values {
                out.values.insert(format!("{ns}/{q}"), e.clone());
            }
            for (k, v) in &child.aux {
                out.aux.insert(format!("{ns}/{k}"), v.clone());
            }
            for (k, v) in &child.twin_inputs {
                out.twin_inputs.insert(format!("{ns}/{k}"), *v);
            }
        }
        out
    }
}
