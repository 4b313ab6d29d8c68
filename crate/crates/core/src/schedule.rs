//! Training configuration and the step learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::losses::LossSwitches;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ird,
    Idpnet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentFlags {
    pub crop: bool,
    pub scale: bool,
    pub flip: bool,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        Self { crop: true, scale: true, flip: true }
    }
}

impl AugmentFlags {
    pub const NONE: AugmentFlags = AugmentFlags { crop: false, scale: false, flip: false };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub base_lr: f64,
    pub epochs: usize,
    pub lr_drop_epochs: Vec<usize>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub augment: AugmentFlags,
    #[serde(default = "yes")]
    pub enable_tiou: bool,
    #[serde(default = "yes")]
    pub enable_tpl: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_k")]
    pub tpl_k: usize,
    #[serde(default = "default_margin")]
    pub tpl_margin: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn yes() -> bool {
    true
}

fn default_k() -> usize {
    10
}

fn default_margin() -> f64 {
    0.1
}

impl TrainConfig {
    /// Detector schedule: Adam, batch 8, lr 1e-3 divided by 10 at epochs 40 and 60 of 80.
    pub fn ird() -> Self {
        Self {
            stage: Stage::Ird,
            optimizer: OptimizerKind::Adam,
            batch_size: 8,
            base_lr: 1e-3,
            epochs: 80,
            lr_drop_epochs: vec![40, 60],
            momentum: default_momentum(),
            betas: default_betas(),
            weight_decay: 0.0,
            augment: AugmentFlags::default(),
            enable_tiou: true,
            enable_tpl: true,
            seed: 0,
            tpl_k: default_k(),
            tpl_margin: default_margin(),
        }
    }

    /// Depth network schedule: SGD, batch 1, lr 1e-3 divided by 10 at epochs 20 and 30 of 40.
    pub fn idpnet() -> Self {
        Self {
            stage: Stage::Idpnet,
            optimizer: OptimizerKind::Sgd,
            batch_size: 1,
            epochs: 40,
            lr_drop_epochs: vec![20, 30],
            augment: AugmentFlags { crop: false, scale: false, flip: true },
            ..Self::ird()
        }
    }

    pub fn switches(&self) -> LossSwitches {
        LossSwitches { tiou: self.enable_tiou, tpl: self.enable_tpl }
    }

    /// Shrink the schedule to `epochs`, moving drop epochs proportionally.
    pub fn scaled_to(&self, epochs: usize) -> Result<Self> {
        let mut out = self.clone();
        out.epochs = epochs;
        out.lr_drop_epochs = self.lr_drop_epochs.iter().map(|&e| e * epochs / self.epochs).collect();
        out.lr_drop_epochs.dedup();
        out.lr_drop_epochs.retain(|&e| e > 0 && e < epochs);
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            bail!(Config, "epochs must be positive");
        }
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be at least 1");
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            bail!(Config, "base_lr must be positive, got {}", self.base_lr);
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            bail!(Config, "lr_drop_epochs must be strictly increasing");
        }
        if self.lr_drop_epochs.last().is_some_and(|&e| e >= self.epochs) {
            bail!(Config, "lr_drop_epochs must be below epochs ({})", self.epochs);
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(Config, "momentum must lie in [0, 1)");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            bail!(Config, "betas must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            bail!(Config, "weight_decay must be non-negative");
        }
        if self.tpl_k == 0 {
            bail!(Config, "tpl_k must be at least 1");
        }
        if !(self.tpl_margin >= 0.0) {
            bail!(Config, "tpl_margin must be non-negative");
        }
        Ok(())
    }
}

/// `base_lr · 10^(−n)` where `n` counts the drop epochs at or before `epoch`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.epochs {
        bail!(OutOfRange, "epoch {} outside [0, {})", epoch, config.epochs);
    }
    let drops = config.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
    let mut lr = config.base_lr;
    for _ in 0..drops {
        lr /= 10.0;
    }
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_schedules() {
        let ird = TrainConfig::ird();
        assert_eq!(lr_at(39, &ird).unwrap(), 0.001);
        assert_eq!(lr_at(40, &ird).unwrap(), 0.0001);
        assert_eq!(lr_at(60, &ird).unwrap(), 0.00001);
        let idp = TrainConfig::idpnet();
        assert_eq!(lr_at(19, &idp).unwrap(), 0.001);
        assert_eq!(lr_at(20, &idp).unwrap(), 0.0001);
        assert_eq!(lr_at(30, &idp).unwrap(), 0.00001);
        assert!(lr_at(40, &idp).is_err());
    }

    #[test]
    fn no_drops_is_constant() {
        let mut c = TrainConfig::idpnet();
        c.lr_drop_epochs.clear();
        assert!((0..c.epochs).all(|e| lr_at(e, &c).unwrap() == c.base_lr));
    }

    #[test]
    fn scaling_keeps_proportions() {
        let c = TrainConfig::ird().scaled_to(20).unwrap();
        assert_eq!(c.lr_drop_epochs, vec![10, 15]);
    }

    #[test]
    fn validation() {
        let mut c = TrainConfig::ird();
        c.lr_drop_epochs = vec![60, 40];
        assert!(c.validate().is_err());
        c.lr_drop_epochs = vec![80];
        assert!(c.validate().is_err());
        c = TrainConfig::ird();
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }
}
