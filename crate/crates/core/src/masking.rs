//! Block-wise random masking of input mel frames.
//!
//! Each frame independently starts a block with probability `p_m`; a block
//! covers `l_m` frames, clipped at the sequence end. Blocks may overlap, so
//! masked runs can be any length of at least `min(l_m, frames left)`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::signal::MelSpectrogram;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MaskError {
    #[error("mask covers {mask} frames but the spectrogram has {frames}")]
    LengthMismatch { mask: usize, frames: usize },
}

/// What masked frames are replaced with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFill {
    #[default]
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub p_m: f64,
    pub l_m: usize,
    pub fill: MaskFill,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            p_m: 0.01,
            l_m: 40,
            fill: MaskFill::Zero,
        }
    }
}

impl MaskConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(0.0..=1.0).contains(&self.p_m) {
            v.push(alloc::format!(
                "mask.p_m must lie in [0, 1], got {}",
                self.p_m
            ));
        }
        if self.l_m == 0 {
            v.push("mask.l_m must be >= 1".into());
        }
        v
    }

    /// Probability that frame `i` is masked: `1 − (1 − p_m)^min(i + 1, l_m)`.
    pub fn analytic_rate_at(&self, i: usize) -> f64 {
        let covering = (i + 1).min(self.l_m);
        1.0 - libm::pow(1.0 - self.p_m, covering as f64)
    }

    /// Masking probability of any frame at index `>= l_m − 1`.
    pub fn analytic_interior_rate(&self) -> f64 {
        1.0 - libm::pow(1.0 - self.p_m, self.l_m as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub masked: Vec<bool>,
    pub starts: Vec<usize>,
}

impl MaskSpec {
    /// Builds a mask from explicit block starts.
    pub fn from_starts(len: usize, mut starts: Vec<usize>, block_len: usize) -> Self {
        starts.retain(|&s| s < len);
        starts.sort_unstable();
        starts.dedup();
        let mut masked = vec![false; len];
        for &s in &starts {
            for m in &mut masked[s..(s + block_len).min(len)] {
                *m = true;
            }
        }
        Self { masked, starts }
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// `(start, length)` of every maximal masked run.
    pub fn runs(&self) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let mut i = 0;
        while i < self.masked.len() {
            if self.masked[i] {
                let s = i;
                while i < self.masked.len() && self.masked[i] {
                    i += 1;
                }
                runs.push((s, i - s));
            } else {
                i += 1;
            }
        }
        runs
    }
}

/// Draws block starts for a `frames`-long sequence. One uniform draw per frame,
/// in order, so the result depends only on the stream state.
pub fn sample_mask(frames: usize, cfg: &MaskConfig, rng: &mut Rng) -> MaskSpec {
    let starts = (0..frames).filter(|_| rng.uniform() < cfg.p_m).collect();
    MaskSpec::from_starts(frames, starts, cfg.l_m)
}

pub fn apply_mask(
    mel: &MelSpectrogram,
    spec: &MaskSpec,
    cfg: &MaskConfig,
) -> Result<MelSpectrogram, MaskError> {
    if spec.len() != mel.num_frames() {
        return Err(MaskError::LengthMismatch {
            mask: spec.len(),
            frames: mel.num_frames(),
        });
    }
    let mut out = mel.clone();
    for (t, _) in spec.masked.iter().enumerate().filter(|(_, &m)| m) {
        match cfg.fill {
            MaskFill::Zero => out.frame_mut(t).fill(0.0),
        }
    }
    Ok(out)
}

/// Monte-Carlo masking statistics over many independently seeded trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub p_m: f64,
    pub l_m: usize,
    #[serde(rename = "T")]
    pub frames: usize,
    pub trials: usize,
    pub empirical_interior_rate: f64,
    pub analytic_interior_rate: f64,
}

/// Trial `k` uses the stream keyed by `(seed, k)`.
pub fn mask_stats(cfg: &MaskConfig, frames: usize, trials: usize, seed: u64) -> MaskStats {
    let interior_start = cfg.l_m.saturating_sub(1);
    let mut masked = 0usize;
    let mut total = 0usize;
    for k in 0..trials {
        let mut rng = Rng::keyed(seed, &[k as u64]);
        let spec = sample_mask(frames, cfg, &mut rng);
        if interior_start < frames {
            masked += spec.masked[interior_start..].iter().filter(|&&m| m).count();
            total += frames - interior_start;
        }
    }
    MaskStats {
        p_m: cfg.p_m,
        l_m: cfg.l_m,
        frames,
        trials,
        empirical_interior_rate: if total == 0 {
            0.0
        } else {
            masked as f64 / total as f64
        },
        analytic_interior_rate: cfg.analytic_interior_rate(),
    }
}
