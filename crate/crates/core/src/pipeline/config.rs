use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cfm::{LossNormalization, SigmaMin};
use crate::error::{Error, Result};
use crate::model::{LossOptions, ModelConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adamw,
}

/// Training settings; every key is optional in the TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub mixup_rate: f64,
    pub sigma_min: SigmaMin,
    pub loss_normalization: LossNormalization,
    pub recon_weight: f64,
    /// Random crop length in frames; 0 keeps whole clips.
    pub max_frames: usize,
    /// Perturb audio before content analysis during training.
    pub perturb_content: bool,
    pub seed: u64,
    pub log_every: u64,
    /// Dev-split loss interval; 0 disables.
    pub dev_every: u64,
    /// Checkpoint interval; 0 writes only at the end.
    pub checkpoint_every: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            optimizer: OptimizerKind::Adamw,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            grad_clip: 1.0,
            batch_size: 8,
            total_steps: 3000,
            mixup_rate: 0.5,
            sigma_min: SigmaMin::default(),
            loss_normalization: LossNormalization::default(),
            recon_weight: 1.0,
            max_frames: 0,
            perturb_content: true,
            seed: 0,
            log_every: 10,
            dev_every: 100,
            checkpoint_every: 500,
            model: ModelConfig::desk(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.mixup_rate) {
            return fail("mixup_rate must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("adam betas must be in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.grad_clip.is_nan() || self.grad_clip <= 0.0 || self.recon_weight < 0.0 {
            return fail("weight_decay and recon_weight must be ≥ 0, grad_clip > 0");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.log_every == 0 {
            return fail("log_every must be positive");
        }
        self.model.validate()
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions { sigma_min: self.sigma_min, normalization: self.loss_normalization, recon_weight: self.recon_weight }
    }
}
