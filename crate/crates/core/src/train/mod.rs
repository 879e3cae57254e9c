//! Optimization: cross-entropy loss, Adam with decoupled weight decay,
//! early stopping on validation loss, and the epoch loop.

mod adam;
mod early_stop;
mod trainer;

use rand::RngCore;
use thiserror::Error;

use crate::data::DataError;
use crate::metrics::MetricsError;
use crate::tensor::{Element, Graph, Tensor, TensorError, Var};
use crate::vit::{Mode, ModelError, VisionTransformer};

pub use adam::{Adam, AdamConfig};
pub use early_stop::{EarlyStopping, Verdict};
pub use trainer::{evaluate, train, DatasetValidation, Evaluation, StopReason, TrainOutcome, Trainer, TrainerState, Validation, ValidationMetrics};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter `{param}` at optimizer step {step}")]
    NonFiniteGradient { param: String, step: u64 },
    #[error("training diverged (non-finite {what}) in epoch {epoch}; last good epoch: {}", last_good_epoch.map_or("none".to_string(), |e| e.to_string()))]
    Diverged {
        what: &'static str,
        epoch: usize,
        last_good_epoch: Option<usize>,
    },
    #[error("training has already finished")]
    Finished,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Optimizer and loop hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub early_stop_patience: usize,
    /// Validation loss must drop by more than this to count as improvement.
    pub early_stop_min_delta: f64,
    /// Samples per forward/backward pass. Gradients of the pieces are
    /// combined with weights `len / batch_size`, so this bounds memory
    /// without changing the update.
    pub micro_batch: usize,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip_norm: Option<f64>,
    /// Stop as soon as validation accuracy reaches this value.
    pub target_val_accuracy: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            batch_size: 256,
            max_epochs: 100,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            early_stop_patience: 10,
            early_stop_min_delta: 1e-6,
            micro_batch: 32,
            grad_clip_norm: None,
            target_val_accuracy: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(beta > 0.0 && beta < 1.0) {
                return bad(format!("{name} {beta} outside (0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if self.batch_size == 0 || self.micro_batch == 0 || self.max_epochs == 0 {
            return bad("batch_size, micro_batch and max_epochs must be at least 1".into());
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1".into());
        }
        if !(self.early_stop_min_delta >= 0.0) {
            return bad("early_stop_min_delta must be non-negative".into());
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return bad(format!("grad_clip_norm {c} must be positive"));
            }
        }
        Ok(())
    }
}

/// Per-epoch training curve entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_precision_macro: f64,
    pub val_recall_macro: f64,
}

/// Anything mapping `[B, H, W, C]` images to `[B, K]` logits on a graph.
/// `params` are the bound parameters, indexed by `ParamId`.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    fn logits<T: Element>(&self, g: &Graph<'_, T>, params: &[Var], images: &Tensor<T>, mode: Mode, rng: &mut dyn RngCore) -> Result<Var>;
}

impl Classifier for VisionTransformer {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn logits<T: Element>(&self, g: &Graph<'_, T>, params: &[Var], images: &Tensor<T>, mode: Mode, rng: &mut dyn RngCore) -> Result<Var> {
        Ok(self.forward(g, params, images, mode, rng)?)
    }
}

/// Mean categorical cross-entropy of `[B, K]` logits, fused with the
/// softmax for stability. The gradient w.r.t. the logits is
/// `(softmax − onehot) / B`.
pub fn cross_entropy<T: Element>(g: &Graph<'_, T>, logits: Var, labels: &[usize]) -> Result<Var> {
    Ok(g.softmax_cross_entropy(logits, labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cost_ln_k() {
        let g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::zeros(&[3, 4]));
        let loss = cross_entropy(&g, logits, &[0, 1, 3]).unwrap();
        assert!((g.scalar(loss).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_cost_nothing() {
        let g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::new(&[2, 3], vec![100.0, 0.0, 0.0, 0.0, 0.0, 100.0]).unwrap());
        let loss = cross_entropy(&g, logits, &[0, 2]).unwrap();
        assert!(g.scalar(loss).unwrap() < 1e-40);
    }

    #[test]
    fn out_of_range_label_is_an_error() {
        let g = Graph::<f32>::new();
        let logits = g.leaf(Tensor::zeros(&[1, 4]));
        assert!(cross_entropy(&g, logits, &[4]).is_err());
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        for bad in [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { adam_beta1: 1.0, ..Default::default() },
            TrainConfig { early_stop_patience: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { grad_clip_norm: Some(-1.0), ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
