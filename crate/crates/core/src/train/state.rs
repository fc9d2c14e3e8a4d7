use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::batch::{build_training_batch, epoch_batches, Batch, Pipeline};
use super::optim::{clip_grad_norm, AdamW};
use super::{noam_lr, TrainConfig, TrainError};
use crate::model::{batch_loss_and_grad, Encoder, EncoderConfig, EncoderParams, Example};
use crate::quantizer::Quantizer;
use crate::rng::Rng;
use crate::signal::Utterance;

const INIT_KEY: u64 = 0x696e_6974;
const DATA_KEY: u64 = 0x6461_7461;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub masked_acc: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub selected_windows: usize,
    #[serde(default, skip_serializing_if = "is_false")]
    pub skipped: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Everything that changes (or must be proven not to change) during a run.
pub struct TrainState {
    pub encoder: Encoder,
    pub params: EncoderParams,
    pub optimizer: AdamW,
    /// Completed steps.
    pub step: u64,
    /// Source of the per-step data streams.
    pub rng: Rng,
    quantizer: Quantizer,
}

impl TrainState {
    pub fn new(encoder_cfg: &EncoderConfig, quantizer: Quantizer, train_cfg: &TrainConfig) -> Self {
        let init_seed = Rng::keyed(train_cfg.seed, &[INIT_KEY]).next_u64();
        let params = EncoderParams::init(encoder_cfg, init_seed);
        let optimizer = AdamW::new(&params);
        Self {
            encoder: Encoder::new(encoder_cfg),
            params,
            optimizer,
            step: 0,
            rng: Rng::keyed(train_cfg.seed, &[DATA_KEY]),
            quantizer,
        }
    }

    /// Reassembles a state from checkpointed parts.
    pub fn from_parts(
        encoder_cfg: &EncoderConfig,
        params: EncoderParams,
        optimizer: AdamW,
        step: u64,
        rng: Rng,
        quantizer: Quantizer,
    ) -> Self {
        Self {
            encoder: Encoder::new(encoder_cfg),
            params,
            optimizer,
            step,
            rng,
            quantizer,
        }
    }

    /// Read-only: nothing in training can reach the quantizer mutably.
    pub fn quantizer(&self) -> &Quantizer {
        &self.quantizer
    }
}

/// Forward, masked loss, backward, clip, update. A batch with no selected
/// window advances the step counter and leaves parameters and moments untouched.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<StepMetrics, TrainError> {
    let step = state.step + 1;
    let lr = noam_lr(step, cfg);
    let examples: Vec<Example> = batch
        .examples
        .iter()
        .map(|e| e.to_model_example())
        .collect();
    let out = batch_loss_and_grad(&state.encoder, &state.params, &examples, true)?;
    if out.skipped {
        state.step = step;
        return Ok(StepMetrics {
            step,
            loss: 0.0,
            masked_acc: 0.0,
            grad_norm: 0.0,
            lr,
            selected_windows: 0,
            skipped: true,
        });
    }
    if !out.loss.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step,
            loss: out.loss,
        });
    }
    let mut grads = out.grads;
    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip_norm);
    if !grad_norm.is_finite() {
        return Err(TrainError::NonFiniteGradient { step });
    }
    state.optimizer.step(&mut state.params, &grads, lr, cfg);
    state.step = step;
    Ok(StepMetrics {
        step,
        loss: out.loss,
        masked_acc: out.correct as f64 / out.positions as f64,
        grad_norm,
        lr,
        selected_windows: out.positions,
        skipped: false,
    })
}

/// Picks the next batch from `corpus` (epoch-shuffled by `cfg.seed`), builds
/// it with a stream split from `state.rng`, and trains on it.
pub fn run_step(
    state: &mut TrainState,
    corpus: &[Utterance],
    noise_pool: &[Utterance],
    pipeline: &Pipeline,
    cfg: &TrainConfig,
) -> Result<StepMetrics, TrainError> {
    let per_epoch = corpus.len() / cfg.batch_size.max(1);
    if per_epoch == 0 {
        return Err(TrainError::CorpusTooSmall {
            corpus: corpus.len(),
            batch_size: cfg.batch_size,
        });
    }
    let global = state.step;
    let epoch = global / per_epoch as u64;
    let batches = epoch_batches(corpus.len(), cfg.batch_size, cfg.seed, epoch);
    let members: Vec<&Utterance> = batches[(global % per_epoch as u64) as usize]
        .iter()
        .map(|&i| &corpus[i])
        .collect();
    let mut stream = state.rng.split();
    let batch = build_training_batch(
        pipeline,
        &members,
        noise_pool,
        &state.quantizer,
        &mut stream,
    )?;
    train_step(state, &batch, cfg)
}
