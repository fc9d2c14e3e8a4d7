//! Frozen random-projection quantizer.
//!
//! A mel frame is projected through a fixed Gaussian matrix into the codebook
//! space and assigned the index of its nearest codebook row. Neither matrix is
//! ever trained: after construction the quantizer only exposes read access.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::rng::{GaussianStream, Rng};
use crate::signal::MelSpectrogram;

/// Input frame rate (tokens per second) of a 10 ms-hop mel sequence.
pub const INPUT_TOKEN_RATE: f32 = 100.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuantizerError {
    #[error("invalid quantizer dimensions: {0}")]
    InvalidDims(String),
    #[error("mel spectrogram has no frames")]
    EmptyInput,
    #[error("feature dimension {got} does not match quantizer input dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
}

/// How frames are compared to codebook rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// L2 distance between `v/(‖v‖+ε)` and `c/(‖c‖+ε)`.
    #[default]
    Cosine,
    /// Plain L2 distance between `v` and `c`.
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerConfig {
    pub seed: u64,
    pub in_dim: usize,
    pub code_dim: usize,
    pub vocab: usize,
    pub metric: Metric,
    pub norm_eps: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            in_dim: 80,
            code_dim: 16,
            vocab: 8192,
            metric: Metric::Cosine,
            norm_eps: 1e-8,
        }
    }
}

impl QuantizerConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, val) in [
            ("in_dim", self.in_dim),
            ("code_dim", self.code_dim),
            ("vocab", self.vocab),
        ] {
            if val == 0 {
                v.push(alloc::format!("quantizer.{name} must be >= 1"));
            }
        }
        if self.vocab > u32::MAX as usize {
            v.push("quantizer.vocab must fit in u32".into());
        }
        if !(self.norm_eps >= 0.0) {
            v.push(alloc::format!(
                "quantizer.norm_eps must be >= 0, got {}",
                self.norm_eps
            ));
        }
        v
    }
}

/// Token ids with the frame rate they were produced at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub rate: f32,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Quantizer {
    cfg: QuantizerConfig,
    projection: Vec<f32>,
    codebook: Vec<f32>,
    // Derived search table: normalized (or raw) codebook rows in f64 and their squared norms.
    search_rows: Vec<f64>,
    search_sq_norms: Vec<f64>,
}

impl PartialEq for Quantizer {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg
            && self.projection == other.projection
            && self.codebook == other.codebook
    }
}

impl Quantizer {
    /// Draws the projection (`in_dim × code_dim`, row-major) and then the
    /// codebook (`vocab × code_dim`) as standard normals from one stream.
    pub fn new(cfg: QuantizerConfig) -> Result<Self, QuantizerError> {
        let errs = cfg.violations();
        if !errs.is_empty() {
            return Err(QuantizerError::InvalidDims(errs.join("; ")));
        }
        let mut rng = Rng::seed_from_u64(cfg.seed);
        let mut gauss = GaussianStream::new(&mut rng);
        let projection = (0..cfg.in_dim * cfg.code_dim)
            .map(|_| gauss.sample() as f32)
            .collect();
        let codebook = (0..cfg.vocab * cfg.code_dim)
            .map(|_| gauss.sample() as f32)
            .collect();
        Ok(Self::assemble(cfg, projection, codebook))
    }

    /// Convenience constructor with the default cosine metric.
    pub fn init(
        seed: u64,
        in_dim: usize,
        code_dim: usize,
        vocab: usize,
    ) -> Result<Self, QuantizerError> {
        Self::new(QuantizerConfig {
            seed,
            in_dim,
            code_dim,
            vocab,
            ..QuantizerConfig::default()
        })
    }

    /// Rebuilds a quantizer from stored matrices (e.g. a checkpoint).
    pub fn from_parts(
        cfg: QuantizerConfig,
        projection: Vec<f32>,
        codebook: Vec<f32>,
    ) -> Result<Self, QuantizerError> {
        let errs = cfg.violations();
        if !errs.is_empty() {
            return Err(QuantizerError::InvalidDims(errs.join("; ")));
        }
        if projection.len() != cfg.in_dim * cfg.code_dim
            || codebook.len() != cfg.vocab * cfg.code_dim
        {
            return Err(QuantizerError::InvalidDims(alloc::format!(
                "stored matrices have {} and {} entries, expected {}x{} and {}x{}",
                projection.len(),
                codebook.len(),
                cfg.in_dim,
                cfg.code_dim,
                cfg.vocab,
                cfg.code_dim
            )));
        }
        Ok(Self::assemble(cfg, projection, codebook))
    }

    fn assemble(cfg: QuantizerConfig, projection: Vec<f32>, codebook: Vec<f32>) -> Self {
        let mut search_rows = Vec::with_capacity(codebook.len());
        let mut search_sq_norms = Vec::with_capacity(cfg.vocab);
        for row in codebook.chunks_exact(cfg.code_dim) {
            let row: Vec<f64> = row.iter().map(|&x| x as f64).collect();
            let scale = match cfg.metric {
                Metric::Cosine => 1.0 / (l2_norm(&row) + cfg.norm_eps),
                Metric::L2 => 1.0,
            };
            let start = search_rows.len();
            search_rows.extend(row.iter().map(|x| x * scale));
            search_sq_norms.push(search_rows[start..].iter().map(|x| x * x).sum());
        }
        Self {
            cfg,
            projection,
            codebook,
            search_rows,
            search_sq_norms,
        }
    }

    pub fn config(&self) -> &QuantizerConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.cfg.seed
    }

    pub fn in_dim(&self) -> usize {
        self.cfg.in_dim
    }

    pub fn code_dim(&self) -> usize {
        self.cfg.code_dim
    }

    pub fn vocab(&self) -> usize {
        self.cfg.vocab
    }

    /// Row-major `in_dim × code_dim`.
    pub fn projection(&self) -> &[f32] {
        &self.projection
    }

    /// Row-major `vocab × code_dim`.
    pub fn codebook(&self) -> &[f32] {
        &self.codebook
    }

    /// `frameᵀ · projection`, accumulated in f64.
    pub fn project(&self, frame: &[f32]) -> Vec<f64> {
        assert_eq!(
            frame.len(),
            self.cfg.in_dim,
            "frame length must equal quantizer in_dim"
        );
        let d = self.cfg.code_dim;
        let mut v = alloc::vec![0.0f64; d];
        for (x, row) in frame.iter().zip(self.projection.chunks_exact(d)) {
            let x = *x as f64;
            for (acc, &p) in v.iter_mut().zip(row) {
                *acc += x * p as f64;
            }
        }
        v
    }

    /// Index of the nearest codebook row to a projected vector; ties go to the smallest index.
    pub fn nearest(&self, projected: &[f64]) -> u32 {
        let d = self.cfg.code_dim;
        let scale = match self.cfg.metric {
            Metric::Cosine => 1.0 / (l2_norm(projected) + self.cfg.norm_eps),
            Metric::L2 => 1.0,
        };
        // ‖a − c‖² = ‖a‖² + ‖c‖² − 2a·c; ‖a‖² is shared by every row.
        let mut best = 0u32;
        let mut best_score = f64::INFINITY;
        for (k, (row, sq)) in self
            .search_rows
            .chunks_exact(d)
            .zip(&self.search_sq_norms)
            .enumerate()
        {
            let dot: f64 = row.iter().zip(projected).map(|(c, a)| c * a).sum();
            let score = sq - 2.0 * scale * dot;
            if score < best_score {
                best_score = score;
                best = k as u32;
            }
        }
        best
    }

    pub fn quantize_frame(&self, frame: &[f32]) -> u32 {
        self.nearest(&self.project(frame))
    }

    /// One token per mel frame at 100 tokens/s.
    pub fn quantize(&self, mel: &MelSpectrogram) -> Result<TokenSequence, QuantizerError> {
        if mel.num_frames() == 0 {
            return Err(QuantizerError::EmptyInput);
        }
        if mel.n_mels != self.cfg.in_dim {
            return Err(QuantizerError::DimMismatch {
                expected: self.cfg.in_dim,
                got: mel.n_mels,
            });
        }
        let tokens = mel.iter_frames().map(|f| self.quantize_frame(f)).collect();
        Ok(TokenSequence {
            tokens,
            rate: INPUT_TOKEN_RATE,
        })
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum::<f64>())
}
