//! Bridges the 10 ms input rate and the 8x-subsampled encoder rate.
//!
//! Input frames are grouped into consecutive non-overlapping windows of
//! `factor` frames; a trailing partial window is dropped, the same length
//! rule the strided encoder convolutions follow. A window enters the loss when
//! its masked fraction reaches `threshold`. Targets for a window come from the
//! mean of its frames' projections, quantized once.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::masking::MaskSpec;
use crate::quantizer::{Quantizer, TokenSequence, INPUT_TOKEN_RATE};
use crate::signal::MelSpectrogram;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AlignError {
    #[error("{frames} frames is shorter than one {factor}-frame window")]
    TooShort { frames: usize, factor: usize },
    #[error("feature dimension {got} does not match quantizer input dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub factor: usize,
    pub threshold: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            factor: 8,
            threshold: 0.9,
        }
    }
}

impl AlignConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.factor == 0 {
            v.push("align.factor must be >= 1".into());
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            v.push(alloc::format!(
                "align.threshold must lie in (0, 1], got {}",
                self.threshold
            ));
        }
        v
    }

    /// Output windows for `frames` input frames.
    pub fn windows(&self, frames: usize) -> usize {
        frames / self.factor
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub selected: Vec<bool>,
    pub mask_fraction: Vec<f64>,
}

impl SelectionMask {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

pub fn downsample_mask(mask: &MaskSpec, cfg: &AlignConfig) -> Result<SelectionMask, AlignError> {
    if mask.len() < cfg.factor {
        return Err(AlignError::TooShort {
            frames: mask.len(),
            factor: cfg.factor,
        });
    }
    let mask_fraction: Vec<f64> = mask
        .masked
        .chunks_exact(cfg.factor)
        .map(|w| w.iter().filter(|&&m| m).count() as f64 / cfg.factor as f64)
        .collect();
    let selected = mask_fraction.iter().map(|&f| f >= cfg.threshold).collect();
    Ok(SelectionMask {
        selected,
        mask_fraction,
    })
}

/// Output-rate target tokens computed from clean features.
pub fn align_targets(
    q: &Quantizer,
    clean_mel: &MelSpectrogram,
    cfg: &AlignConfig,
) -> Result<TokenSequence, AlignError> {
    if clean_mel.n_mels != q.in_dim() {
        return Err(AlignError::DimMismatch {
            expected: q.in_dim(),
            got: clean_mel.n_mels,
        });
    }
    let frames = clean_mel.num_frames();
    if frames < cfg.factor {
        return Err(AlignError::TooShort {
            frames,
            factor: cfg.factor,
        });
    }
    let tokens = (0..cfg.windows(frames))
        .map(|w| q.nearest(&window_projection(q, clean_mel, w * cfg.factor, cfg.factor)))
        .collect();
    Ok(TokenSequence {
        tokens,
        rate: INPUT_TOKEN_RATE / cfg.factor as f32,
    })
}

/// Mean of the projections of frames `start..start + len`.
pub fn window_projection(
    q: &Quantizer,
    mel: &MelSpectrogram,
    start: usize,
    len: usize,
) -> Vec<f64> {
    let mut acc = alloc::vec![0.0; q.code_dim()];
    for t in start..start + len {
        for (a, p) in acc.iter_mut().zip(q.project(mel.frame(t))) {
            *a += p;
        }
    }
    for a in &mut acc {
        *a /= len as f64;
    }
    acc
}

/// Window indices that contribute to the loss, strictly increasing.
pub fn loss_positions(sel: &SelectionMask) -> Vec<usize> {
    sel.selected
        .iter()
        .enumerate()
        .filter(|(_, &s)| s)
        .map(|(w, _)| w)
        .collect()
}
