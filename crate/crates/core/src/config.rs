//! Training and run configuration, serialized as JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::em::EmConfig;
use crate::error::{Error, Result};
use crate::nets::ModelConfig;

/// Loss variants compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossVariant {
    /// Expectations under `q(z|x,y_true)`, unit decoder variance.
    A,
    /// Expectations under the EM marginal `q(z,y|x)`, unit decoder variance.
    B1,
    /// As `B1` with `σ_x = 0.6` and the classification term scaled by
    /// `0.1·W·H·C`.
    B2,
}

/// Decoder noise and term weights after resolving the loss variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub sigma_x: f64,
    pub cls_scale: f64,
    /// Whether reconstruction and classification use samples from the EM
    /// marginal rather than the true label.
    pub marginal_expectations: bool,
}

pub const B2_SIGMA_X: f64 = 0.6;
pub const B2_CLS_FACTOR: f64 = 0.1;

/// Optimization hyperparameters. Defaults follow the binary-digit setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the conditional (M1) model.
    pub alpha: f64,
    /// Weight of the classifier (M2) model.
    pub beta: f64,
    /// Weight of the consistency regularizer.
    pub gamma: f64,
    /// EM classifier used inside the loss and for per-epoch accuracy. Its
    /// seed is replaced per batch during training.
    pub em: EmConfig,
    /// Samples `O` for the reconstruction and classification expectations.
    pub expectation_samples: usize,
    /// `δ ~ U(−ε, ε)` in the consistency loss.
    pub epsilon: f64,
    pub consistency_samples: usize,
    /// Override of the decoder standard deviation implied by the variant.
    pub sigma_x: Option<f64>,
    /// Override of the classification weight implied by the variant.
    pub cls_scale: Option<f64>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss_variant: LossVariant,
    pub seed: u64,
    /// Images per forward/backward pass; gradients are accumulated over a
    /// batch. Changes results only through float summation order.
    pub chunk_size: usize,
    /// Stop gradients through all but the last EM iteration.
    pub em_detach_early_iterations: bool,
    /// Evaluate accuracy and reconstruction on at most this many images.
    pub eval_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            em: EmConfig::default(),
            expectation_samples: 1,
            epsilon: 2.94,
            consistency_samples: 10,
            sigma_x: None,
            cls_scale: None,
            learning_rate: 5e-4,
            batch_size: 64,
            epochs: 24,
            loss_variant: LossVariant::B2,
            seed: 0,
            chunk_size: 16,
            em_detach_early_iterations: false,
            eval_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.chunk_size == 0 || self.expectation_samples == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, chunk_size and expectation_samples must be positive".into(),
            ));
        }
        if let Some(s) = self.sigma_x {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument("sigma_x must be positive".into()));
            }
        }
        if let Some(s) = self.cls_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument("cls_scale must be positive".into()));
            }
        }
        self.em.validate()
    }

    /// Resolves the variant for images with `pixels = W·H·C`.
    pub fn loss_settings(&self, pixels: usize) -> Result<LossSettings> {
        let (sigma, scale, marginal) = match self.loss_variant {
            LossVariant::A => (1.0, 1.0, false),
            LossVariant::B1 => (1.0, 1.0, true),
            LossVariant::B2 => (B2_SIGMA_X, B2_CLS_FACTOR * pixels as f64, true),
        };
        if self.loss_variant == LossVariant::B2 {
            let conflict = self.sigma_x.is_some_and(|s| (s - sigma).abs() > 1e-12)
                || self.cls_scale.is_some_and(|s| (s - scale).abs() > 1e-9);
            if conflict {
                return Err(Error::InvalidArgument(format!(
                    "loss variant B2 fixes sigma_x = {sigma} and cls_scale = {scale}"
                )));
            }
        }
        Ok(LossSettings {
            sigma_x: self.sigma_x.unwrap_or(sigma),
            cls_scale: self.cls_scale.unwrap_or(scale),
            marginal_expectations: marginal,
        })
    }
}

/// Everything a command needs: data, model shape and optimization settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.num_classes != self.dataset.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "model has {} classes, dataset has {}",
                self.model.num_classes,
                self.dataset.num_classes()
            )));
        }
        let arch = crate::nets::Architecture::preset(self.model.arch);
        if arch.image != self.dataset.image_shape() {
            return Err(Error::InvalidArgument(format!(
                "architecture expects {:?} images, dataset provides {:?}",
                arch.image,
                self.dataset.image_shape()
            )));
        }
        let pixels = arch.pixels();
        self.train.loss_settings(pixels)?;
        Ok(())
    }
}
