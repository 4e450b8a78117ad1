//! EWMA residual detector with an m-of-n trigger.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

fn default_alpha() -> f64 {
    0.2
}
fn default_kappa() -> f64 {
    4.0
}
fn default_m() -> usize {
    3
}
fn default_n() -> usize {
    5
}
fn default_warmup() -> u64 {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_n")]
    pub n: usize,
    /// Samples that only train the statistics before hits can count.
    #[serde(default = "default_warmup")]
    pub warmup: u64,
    /// Lower bound on sigma per quantity, in SI units.
    #[serde(default)]
    pub sigma_floor: BTreeMap<String, f64>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            kappa: default_kappa(),
            m: default_m(),
            n: default_n(),
            warmup: default_warmup(),
            sigma_floor: BTreeMap::new(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if !(self.kappa > 0.0) {
            return Err(format!("kappa {} must be > 0", self.kappa));
        }
        if self.m == 0 || self.n == 0 || self.m > self.n {
            return Err(format!(
                "trigger policy {}-of-{} is not satisfiable",
                self.m, self.n
            ));
        }
        Ok(())
    }
}

/// Running statistics of one quantity's residuals.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct QuantityStats {
    pub mu: f64,
    pub var: f64,
    pub count: u64,
    hits: VecDeque<bool>,
}

impl QuantityStats {
    pub fn sigma(&self) -> f64 {
        self.var.sqrt()
    }

    pub fn recent_hits(&self) -> usize {
        self.hits.iter().filter(|h| **h).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub hit: bool,
    pub triggered: bool,
    /// `|r - mu| / max(sigma, floor)` before the update.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    cfg: DetectorConfig,
    stats: BTreeMap<String, QuantityStats>,
    model_version: Option<u64>,
}

impl Detector {
    pub fn new(cfg: DetectorConfig) -> Self {
        Self {
            cfg,
            stats: BTreeMap::new(),
            model_version: None,
        }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn stats(&self, quantity: &str) -> Option<&QuantityStats> {
        self.stats.get(quantity)
    }

    /// Clears all statistics when the model version changes.
    pub fn align(&mut self, model_version: u64) {
        if self.model_version != Some(model_version) {
            self.stats.clear();
            self.model_version = Some(model_version);
        }
    }

    /// Scores `r` against the current statistics, then folds it in unless
    /// it was a hit, so an ongoing excursion cannot drag the baseline along.
    pub fn observe(&mut self, quantity: &str, r: f64) -> Observation {
        let cfg = &self.cfg;
        let floor = cfg.sigma_floor.get(quantity).copied().unwrap_or(0.0);
        let st = self.stats.entry(quantity.to_string()).or_default();
        let scale = st.sigma().max(floor);
        let dev = (r - st.mu).abs();
        let score = if scale > 0.0 {
            dev / scale
        } else if dev > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        let hit = st.count >= cfg.warmup && dev > cfg.kappa * scale;
        if !hit {
            let diff = r - st.mu;
            st.mu += cfg.alpha * diff;
            st.var = (1.0 - cfg.alpha) * (st.var + cfg.alpha * diff * diff);
        }
        st.count += 1;
        st.hits.push_back(hit);
        if st.hits.len() > cfg.n {
            st.hits.pop_front();
        }
        Observation {
            hit,
            triggered: hit && st.recent_hits() >= cfg.m,
            score,
        }
    }
}

/// Edge-triggered wear monitor: fires once per upward crossing of the limit.
#[derive(Debug, Clone, PartialEq)]
pub struct MaintenanceTrigger {
    armed: bool,
}

impl Default for MaintenanceTrigger {
    fn default() -> Self {
        Self { armed: true }
    }
}

impl MaintenanceTrigger {
    pub fn check(&mut self, wear: f64, limit: f64) -> bool {
        if wear >= limit {
            std::mem::replace(&mut self.armed, false)
        } else {
            self.armed = true;
            false
        }
    }
}
