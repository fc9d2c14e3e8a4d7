//! Pretraining: schedule, optimizer, batch construction and the train step.

mod batch;
mod optim;
mod state;

pub use batch::{
    build_training_batch, epoch_batches, Batch, Pipeline, PipelineConfig, TrainingExample,
};
pub use optim::{clip_grad_norm, AdamW};
pub use state::{run_step, train_step, StepMetrics, TrainState};

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::align::AlignError;
use crate::augment::AugmentError;
use crate::masking::MaskError;
use crate::model::ModelError;
use crate::quantizer::QuantizerError;
use crate::signal::SignalError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error("non-finite gradient norm at step {step}")]
    NonFiniteGradient { step: u64 },
    #[error("corpus of {corpus} utterances cannot fill a batch of {batch_size}")]
    CorpusTooSmall { corpus: usize, batch_size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            total_steps: 2000,
            warmup_steps: 250,
            peak_lr: 0.004,
            weight_decay: 1e-3,
            grad_clip_norm: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size == 0 {
            v.push("train.batch_size must be >= 1".into());
        }
        if self.warmup_steps == 0 {
            v.push("train.warmup_steps must be >= 1".into());
        }
        if !(self.peak_lr > 0.0) {
            v.push(alloc::format!(
                "train.peak_lr must be > 0, got {}",
                self.peak_lr
            ));
        }
        if !(self.grad_clip_norm > 0.0) {
            v.push(alloc::format!(
                "train.grad_clip_norm must be > 0, got {}",
                self.grad_clip_norm
            ));
        }
        if !(self.weight_decay >= 0.0) {
            v.push(alloc::format!(
                "train.weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                v.push(alloc::format!("train.{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            v.push(alloc::format!(
                "train.adam_eps must be > 0, got {}",
                self.adam_eps
            ));
        }
        v
    }
}

/// Linear warmup to `peak_lr` at `warmup_steps`, then inverse-square-root decay.
pub fn noam_lr(step: u64, cfg: &TrainConfig) -> f64 {
    let s = step.max(1) as f64;
    let w = cfg.warmup_steps as f64;
    cfg.peak_lr * f64::min(s / w, libm::sqrt(w / s))
}
