//! Allocation-only core of a masked-token speech pretraining pipeline.
//!
//! Everything here is a pure function of its inputs plus an explicit [`rng::Rng`]
//! stream: log-mel featurization, the frozen random-projection quantizer,
//! block masking, noisy-speech augmentation planning and mixing, 8x target
//! alignment, a small tape-differentiated encoder, and the optimizer step.
//! File formats, audio IO and the command line live in the `nest` crate.
#![no_std]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod align;
pub mod augment;
pub mod masking;
pub mod model;
pub mod quantizer;
pub mod rng;
pub mod signal;
pub mod tensor;
pub mod train;

pub use align::{AlignConfig, SelectionMask};
pub use augment::{AugmentConfig, AugmentationPlan};
pub use masking::{MaskConfig, MaskSpec};
pub use model::{EncoderConfig, EncoderParams};

pub use quantizer::{Quantizer, TokenSequence};
pub use rng::Rng;
pub use signal::{MelConfig, MelSpectrogram, Waveform};
pub use tensor::Matrix;
pub use train::{TrainConfig, TrainState};
