use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentPolicy, SceneSpec};
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Fractions of `total_steps` at which the learning rate drops tenfold.
    pub drops: Vec<f64>,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            total_steps: 3000,
            drops: vec![27.0 / 36.0, 33.0 / 36.0],
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Default output directory when none is given on the command line.
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            checkpoint_every: 500,
            out_dir: "runs/default".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub data: SceneSpec,
    pub augment: AugmentPolicy,
    pub run: RunConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Panics on a seed above `i64::MAX`, which the text format cannot hold
    /// and [`Config::validate`] rejects.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.data.validate()?;
        self.augment.validate()?;
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        let o = &self.optim;
        if !(o.lr > 0.0) || !o.lr.is_finite() {
            return Err(Error::Config("optim.lr must be positive".into()));
        }
        if !(o.weight_decay >= 0.0) || !(o.eps > 0.0) || !(o.grad_clip >= 0.0) {
            return Err(Error::Config("optim.weight_decay and optim.grad_clip must be >= 0, optim.eps > 0".into()));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("optim betas must lie in [0, 1)".into()));
        }
        if o.batch_size == 0 || o.total_steps == 0 {
            return Err(Error::Config("optim.batch_size and optim.total_steps must be at least 1".into()));
        }
        let mut prev = 0.0;
        for &d in &o.drops {
            if !(d > prev && d < 1.0) {
                return Err(Error::Config(format!(
                    "optim.drops must be strictly increasing inside (0, 1), got {:?}",
                    o.drops
                )));
            }
            prev = d;
        }
        if self.augment.pad_to % 32 != 0 {
            return Err(Error::Config("augment.pad_to must be a multiple of 32".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = Config::default();
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(Config::from_toml("seed = 1\nbogus = 2\n"), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml("[optim]\nlrr = 0.1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(Config::from_toml("[optim]\nlr = 0.0\n").is_err());
        assert!(Config::from_toml("[optim]\ndrops = [0.9, 0.5]\n").is_err());
        assert!(Config::from_toml("[optim]\ndrops = [0.5, 1.0]\n").is_err());
        assert!(Config::from_toml("[model]\nn = 0\n").is_err());
        let cfg = Config::from_toml("seed = 4\n[optim]\ntotal_steps = 10\n").unwrap();
        assert_eq!((cfg.seed, cfg.optim.total_steps), (4, 10));
        let huge = Config { seed: u64::MAX, ..Config::default() };
        assert!(matches!(huge.validate(), Err(Error::Config(_))));
    }
}
