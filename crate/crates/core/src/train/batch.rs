use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::align::{align_targets, downsample_mask, loss_positions, AlignConfig, SelectionMask};
use crate::augment::{
    batch_resolver, mix, plan_with_noise_fallback, AugmentConfig, AugmentationPlan,
};
use crate::masking::{apply_mask, sample_mask, MaskConfig, MaskSpec};
use crate::model::Example;
use crate::quantizer::{Quantizer, TokenSequence};
use crate::rng::Rng;
use crate::signal::{Featurizer, MelConfig, MelSpectrogram, SignalError, Utterance, Waveform};

const EPOCH_KEY: u64 = 0x6570_6f63_6800_0000;

/// Seeded shuffle of `0..n` cut into full batches; the short tail is dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::keyed(seed, &[EPOCH_KEY, epoch]).shuffle(&mut order);
    order
        .chunks_exact(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mel: MelConfig,
    pub mask: MaskConfig,
    pub augment: AugmentConfig,
    pub align: AlignConfig,
}

/// Featurizer plus the per-utterance data configs.
pub struct Pipeline {
    pub cfg: PipelineConfig,
    featurizer: Featurizer,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, SignalError> {
        let featurizer = Featurizer::new(&cfg.mel)?;
        Ok(Self { cfg, featurizer })
    }

    pub fn featurizer(&self) -> &Featurizer {
        &self.featurizer
    }
}

/// Everything derived from one utterance for one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub id: String,
    pub speaker_id: Option<String>,
    pub plan: AugmentationPlan,
    pub augmented: Waveform,
    pub clean_mel: MelSpectrogram,
    /// Augmented, then masked: the encoder input.
    pub input_mel: MelSpectrogram,
    pub mask: MaskSpec,
    /// Output-rate tokens from the clean audio.
    pub targets: TokenSequence,
    pub selection: SelectionMask,
    pub positions: Vec<usize>,
}

impl TrainingExample {
    pub fn to_model_example(&self) -> Example {
        Example {
            input: self.input_mel.clone(),
            targets: self.targets.tokens.clone(),
            positions: self.positions.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub examples: Vec<TrainingExample>,
}

impl Batch {
    pub fn selected_windows(&self) -> usize {
        self.examples.iter().map(|e| e.positions.len()).sum()
    }
}

/// Builds one batch. Each utterance gets its own child stream, split from
/// `rng` in batch order before any work, so the per-utterance results do not
/// depend on processing order.
pub fn build_training_batch(
    pipeline: &Pipeline,
    utterances: &[&Utterance],
    noise_pool: &[Utterance],
    quantizer: &Quantizer,
    rng: &mut Rng,
) -> Result<Batch, TrainError> {
    let streams: Vec<Rng> = utterances.iter().map(|_| rng.split()).collect();
    let resolve = batch_resolver(utterances, noise_pool);
    let cfg = &pipeline.cfg;
    let mut examples = Vec::with_capacity(utterances.len());
    for (utt, mut stream) in utterances.iter().zip(streams) {
        let plan =
            plan_with_noise_fallback(utt, utterances, noise_pool, &cfg.augment, &mut stream)?;
        let augmented = mix(&utt.wave, &plan, &resolve)?;

        let clean_mel = pipeline.featurizer.compute(&utt.wave, &utt.id)?;
        let targets = align_targets(quantizer, &clean_mel, &cfg.align)?;

        let noisy_mel = pipeline.featurizer.compute(&augmented, &utt.id)?;
        let mask = sample_mask(noisy_mel.num_frames(), &cfg.mask, &mut stream);
        let input_mel = apply_mask(&noisy_mel, &mask, &cfg.mask)?;
        let selection = downsample_mask(&mask, &cfg.align)?;
        let positions = loss_positions(&selection);
        examples.push(TrainingExample {
            id: utt.id.clone(),
            speaker_id: utt.wave.speaker_id.clone(),
            plan,
            augmented,
            clean_mel,
            input_mel,
            mask,
            targets,
            selection,
            positions,
        });
    }
    Ok(Batch { examples })
}
