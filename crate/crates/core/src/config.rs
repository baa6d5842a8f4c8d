//! Training and evaluation settings, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::uniform_grid;
use crate::gp::{JitterLadder, MleConfig};
use crate::subtype::EmConfig;

/// Optimizer budget for one maximum-likelihood fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerBudget {
    pub restarts: usize,
    pub max_iter: usize,
    pub rel_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmBudget {
    pub max_iter: usize,
    pub kmeans_restarts: usize,
    /// Independent EM runs per fit; the highest log-likelihood is kept.
    pub starts: usize,
    pub max_reseeds: usize,
    /// Budget of each M-step fit.
    pub mstep: OptimizerBudget,
}

impl Default for EmBudget {
    fn default() -> Self {
        let em = EmConfig::default();
        EmBudget {
            max_iter: em.max_iter,
            kmeans_restarts: em.kmeans_restarts,
            starts: em.starts,
            max_reseeds: em.max_reseeds,
            mstep: OptimizerBudget {
                restarts: em.mstep.restarts,
                max_iter: em.mstep.max_iter,
                rel_tol: em.mstep.rel_tol,
            },
        }
    }
}

impl Default for OptimizerBudget {
    fn default() -> Self {
        let m = MleConfig::default();
        OptimizerBudget {
            restarts: m.restarts,
            max_iter: m.max_iter,
            rel_tol: m.rel_tol,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Epoch duration `T_1`, hours.
    pub epoch_duration: f64,
    /// Number of epochs `K`.
    pub num_epochs: usize,
    /// EM stopping tolerance on the mean responsibility change.
    pub epsilon: f64,
    /// Bayes-factor threshold `B̄`.
    pub bayes_threshold: f64,
    pub g_max: usize,
    /// Skip model selection and fit exactly this many subtypes.
    pub fixed_g: Option<usize>,
    /// Streams to keep, in model order; all cohort streams when absent.
    pub streams: Option<Vec<String>>,
    /// Alarm thresholds for ROC exports.
    pub eta_grid: Vec<f64>,
    /// TPR levels of the false-alarm table.
    pub tpr_targets: Vec<f64>,
    /// Per-epoch kernel amplitude in the deteriorating experts.
    pub free_variance: bool,
    /// Standardized deviation at which the baseline scores one half.
    pub baseline_z: f64,
    pub jitter: JitterLadder,
    pub em: EmBudget,
    /// Budget of the deteriorating-expert fits.
    pub mle: OptimizerBudget,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            epoch_duration: 24.0,
            num_epochs: 6,
            epsilon: 1e-4,
            bayes_threshold: 1.0,
            g_max: 12,
            fixed_g: None,
            streams: None,
            eta_grid: uniform_grid(100),
            tpr_targets: vec![0.5],
            free_variance: false,
            baseline_z: 2.0,
            jitter: JitterLadder::default(),
            em: EmBudget::default(),
            mle: OptimizerBudget::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.epoch_duration.is_finite() && self.epoch_duration > 0.0) {
            return bad(format!(
                "epoch_duration must be positive, got {}",
                self.epoch_duration
            ));
        }
        if self.num_epochs == 0 {
            return bad("num_epochs must be at least 1".into());
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.bayes_threshold > 0.0) {
            return bad(format!(
                "bayes_threshold must be positive, got {}",
                self.bayes_threshold
            ));
        }
        if self.g_max == 0 || self.fixed_g == Some(0) {
            return bad("g_max and fixed_g must be at least 1".into());
        }
        if self.em.starts == 0 {
            return bad("em.starts must be at least 1".into());
        }
        if self.eta_grid.is_empty() || self.eta_grid.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return bad("eta_grid must be a non-empty list of values in [0, 1]".into());
        }
        if self.tpr_targets.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return bad("tpr_targets must lie in [0, 1]".into());
        }
        if !self.baseline_z.is_finite() {
            return bad("baseline_z must be finite".into());
        }
        for (name, b) in [("em.mstep", &self.em.mstep), ("mle", &self.mle)] {
            if b.max_iter == 0 || !(b.rel_tol > 0.0) {
                return bad(format!("{name} needs max_iter >= 1 and rel_tol > 0"));
            }
        }
        self.jitter.validate()
    }

    fn mle_config(&self, budget: &OptimizerBudget, seed: u64) -> MleConfig {
        MleConfig {
            restarts: budget.restarts,
            max_iter: budget.max_iter,
            rel_tol: budget.rel_tol,
            length_scale_bounds: None,
            jitter: self.jitter,
            seed,
        }
    }

    pub fn em_config(&self, seed: u64) -> EmConfig {
        EmConfig {
            epsilon: self.epsilon,
            max_iter: self.em.max_iter,
            kmeans_restarts: self.em.kmeans_restarts,
            starts: self.em.starts,
            max_reseeds: self.em.max_reseeds,
            mstep: self.mle_config(&self.em.mstep, seed),
            seed,
        }
    }

    pub fn expert_mle_config(&self, seed: u64) -> MleConfig {
        self.mle_config(&self.mle, seed)
    }
}
