//! Composite training objective evaluated on plain tensors.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::graph::{diversity_value, l2, DiversityMode};
use crate::tensor::Tensor;

/// Loss weights and optimisation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_diversity: f64,
    pub lambda_siamese: f64,
    pub diversity_margin: f64,
    pub diversity_mode: DiversityMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_diversity: 0.13,
            lambda_siamese: 0.28,
            diversity_margin: 1.0,
            diversity_mode: DiversityMode::HingeNegative,
            learning_rate: 1e-4,
            batch_size: 8,
            epochs: 10,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.lambda_diversity) || !finite_nonneg(self.lambda_siamese) {
            return Err(Error::InvalidConfig(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        if !finite_nonneg(self.diversity_margin) {
            return Err(Error::InvalidConfig(
                "diversity margin must be finite and nonnegative".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(
                "learning rate must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }

    /// `pred + λd·div + λs·siam`.
    pub fn combine(&self, prediction: f64, diversity: f64, siamese: f64) -> LossBreakdown {
        LossBreakdown {
            total: prediction + self.lambda_diversity * diversity + self.lambda_siamese * siamese,
            prediction,
            diversity,
            siamese,
        }
    }
}

/// Loss terms of one batch (or an average over batches).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub prediction: f64,
    pub diversity: f64,
    pub siamese: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.prediction.is_finite()
            && self.diversity.is_finite()
            && self.siamese.is_finite()
    }

    pub(crate) fn accumulate(&mut self, other: &Self, weight: f64) {
        self.total += weight * other.total;
        self.prediction += weight * other.prediction;
        self.diversity += weight * other.diversity;
        self.siamese += weight * other.siamese;
    }
}

/// Sum over the leading (batch) axis of the per-sample L2 norm of `Ŷ − Y`.
pub fn prediction_loss(prediction: &Tensor, target: &Tensor) -> Result<f64> {
    ensure_shape("prediction_loss", target.shape(), prediction.shape())?;
    if prediction.shape().is_empty() {
        return Ok((prediction.item() - target.item()).abs());
    }
    let diff = prediction.zip_map(target, |a, b| a - b);
    Ok((0..diff.dim(0)).map(|b| l2(diff.sample(b))).sum())
}

/// Inter-bank pattern term. Hinge mode is the mean over inter-bank pattern
/// pairs of `max(0, γ − ‖k − k′‖)`; literal mode the mean distance. Fewer
/// than two banks give 0.
pub fn diversity_loss(banks: &[&Tensor], margin: f64, mode: DiversityMode) -> Result<f64> {
    diversity_value(banks, margin, mode)
}

pub fn siamese_loss(similarity: f64) -> f64 {
    -similarity
}
