use alloc::format;

use serde::{Deserialize, Serialize};

use crate::augmentation::AugConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::{ComponentFlags, LossConfig};
use crate::tir::DecoderConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecaySchedule {
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    /// Encoder learning rate after warmup.
    pub lr: f64,
    /// Learning rate of the randomly initialized heads (restoration,
    /// masked-token recovery and identity classifier).
    pub module_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: f64,
    pub epochs: f64,
    pub schedule: DecaySchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Overrides the dataset-derived epoch length.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            module_lr: 5e-5,
            warmup_start_lr: 1e-6,
            warmup_epochs: 5.0,
            epochs: 60.0,
            schedule: DecaySchedule::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            steps_per_epoch: None,
        }
    }
}

impl OptimConfig {
    /// From-scratch toy models need much larger steps than fine-tuning.
    pub fn toy() -> Self {
        Self { lr: 1e-3, module_lr: 1e-3, warmup_start_lr: 1e-4, warmup_epochs: 1.0, epochs: 20.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("lr", self.lr), ("module_lr", self.module_lr), ("epochs", self.epochs), ("eps", self.eps)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.warmup_start_lr < 0.0 || self.warmup_epochs < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("warmup and weight decay settings must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to rebuild and retrain a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub aug: AugConfig,
    pub optim: OptimConfig,
    pub components: ComponentFlags,
    pub mask_ratio: f64,
    /// Per-token masking probability of the masked-token recovery branch.
    pub irr_mask_prob: f64,
    pub batch_size: usize,
    pub instances_per_identity: usize,
    /// Training length in steps; replaces `optim.epochs` in the schedule.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            loss: LossConfig::default(),
            aug: AugConfig::default(),
            optim: OptimConfig::default(),
            components: ComponentFlags::default(),
            mask_ratio: 0.7,
            irr_mask_prob: 0.15,
            batch_size: 64,
            instances_per_identity: 2,
            max_steps: None,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            decoder: DecoderConfig::toy(),
            optim: OptimConfig::toy(),
            // A 64x32 canvas carries three small garment regions; erasing or
            // shifting them contradicts the caption more often than it helps.
            aug: AugConfig { crop_padding: 0, erase_prob: 0.0, ..AugConfig::default() },
            // The summed-pixel restoration loss is two orders of magnitude
            // above the retrieval losses and swamps them in a model trained
            // from scratch.
            loss: LossConfig { tir_weight: 0.01, ..LossConfig::default() },
            batch_size: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.loss.validate()?;
        self.aug.validate()?;
        self.optim.validate()?;
        if !(0.0..=1.0).contains(&self.mask_ratio) || !(0.0..=1.0).contains(&self.irr_mask_prob) {
            return Err(Error::Config("mask_ratio and irr_mask_prob must lie in [0, 1]".into()));
        }
        if self.batch_size < 2 || self.instances_per_identity == 0 || !self.batch_size.is_multiple_of(self.instances_per_identity) {
            return Err(Error::Config(format!(
                "batch_size {} must be >= 2 and a multiple of instances_per_identity {}",
                self.batch_size, self.instances_per_identity
            )));
        }
        let f = &self.components;
        if !(f.tir || f.cmt || f.irr || f.sdm || f.id) {
            return Err(Error::Config("at least one loss component must be enabled".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::String;

    #[test]
    fn round_trip_is_byte_identical() {
        for cfg in [ExperimentConfig::default(), ExperimentConfig::toy()] {
            let a: String = serde_json::to_string_pretty(&cfg).unwrap();
            let back: ExperimentConfig = serde_json::from_str(&a).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(serde_json::to_string_pretty(&back).unwrap(), a);
        }
    }

    #[test]
    fn fine_tuning_defaults() {
        let c = ExperimentConfig::default();
        assert_eq!((c.optim.lr, c.optim.module_lr, c.optim.warmup_start_lr), (1e-5, 5e-5, 1e-6));
        assert_eq!((c.optim.epochs, c.optim.warmup_epochs, c.mask_ratio), (60.0, 5.0, 0.7));
        assert_eq!(c.decoder.depth, 4);
        c.validate().unwrap();
        ExperimentConfig::toy().validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = ExperimentConfig::toy();
        c.batch_size = 7;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::toy();
        c.components = ComponentFlags { tir: false, cmt: false, irr: false, sdm: false, id: false };
        assert!(c.validate().is_err());
    }
}
