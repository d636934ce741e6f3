//! Run configuration shared by the training, evaluation and explanation
//! entry points.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datapipe::Split;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::LossWeights;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "RCA_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    /// Per-epoch training history (JSON).
    pub history: Option<PathBuf>,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the warmup-cosine schedule.
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the self-labeled template clustering loss.
    pub template_weight: f64,
    /// Finite-difference step (relative to the gradient norm) for the
    /// Hessian-vector products of the gradient-norm penalty.
    pub hvp_step: f64,
    pub train_splits: Vec<Split>,
    pub loss: LossWeights,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            checkpoint: None,
            report: None,
            history: None,
            seed: 0,
            epochs: 30,
            batch_size: 4,
            lr: 3e-4,
            weight_decay: 0.01,
            template_weight: 0.1,
            hvp_step: 1e-4,
            train_splits: vec![Split::Train],
            loss: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a JSON config. Malformed files and unknown keys are
    /// configuration errors.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `RCA_SEED` when it is set.
    pub fn with_env(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be positive and weight_decay non-negative".into()));
        }
        if !(self.template_weight >= 0.0) || !(self.hvp_step > 0.0) {
            return Err(Error::Config("template_weight must be non-negative and hvp_step positive".into()));
        }
        if self.train_splits.is_empty() {
            return Err(Error::Config("train_splits is empty".into()));
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"epochs": 3, "colour": 1}"#).unwrap_err();
        assert!(err.to_string().contains("colour"));
        let nested = serde_json::from_str::<RunConfig>(r#"{"model": {"d_modle": 8}}"#);
        assert!(nested.is_err());
    }

    #[test]
    fn every_field_has_a_default() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!((cfg.epochs, cfg.batch_size), (30, 4));
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trips() {
        let cfg = RunConfig {
            seed: 9,
            epochs: 2,
            ..Default::default()
        };
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
