//! Miniature speech encoder with the 8x subsampling length contract.
//!
//! Three strided 1D convolutions (each followed by GELU) turn `T` mel frames
//! into `⌊T/8⌋` frames, a fixed sinusoidal position table is added, then
//! pre-norm residual blocks run (FFN only, or single-head self-attention
//! followed by FFN) before a final norm and a linear head over the vocabulary.
//! All activations are f64; parameter values stay f32-representable so the
//! float32 checkpoint payload is lossless.

mod gradcheck;
mod loss;
pub mod tape;

pub use gradcheck::{grad_check, grad_check_with, GradCheckReport, GRAD_FLOOR};
pub use loss::{batch_loss_and_grad, masked_ce_grad, masked_ce_loss, BatchLoss, CeOutput, Example};

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::rng::{GaussianStream, Rng};
use crate::signal::MelSpectrogram;
use crate::tensor::Matrix;
use tape::{Tape, ValueId};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("{frames} input frames produce no output frame (need at least {min})")]
    TooShort { frames: usize, min: usize },
    #[error("input has {got} features per frame, encoder expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("loss position {position} is outside [0, {windows})")]
    IndexOutOfRange { position: usize, windows: usize },
    #[error("{targets} targets for {windows} output windows")]
    TargetLength { targets: usize, windows: usize },
    #[error("target token {token} is outside the {vocab}-entry vocabulary")]
    TargetOutOfVocab { token: u32, vocab: usize },
    #[error("parameter set does not match the encoder layout: {0}")]
    LayoutMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    #[default]
    Ffn,
    AttentionFfn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_dim: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub block_kind: BlockKind,
    pub d_ff: usize,
    pub vocab: usize,
    pub conv_kernel: usize,
    pub conv_strides: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_dim: 80,
            d_model: 64,
            n_blocks: 2,
            block_kind: BlockKind::Ffn,
            d_ff: 256,
            vocab: 8192,
            conv_kernel: 5,
            conv_strides: alloc::vec![2, 2, 2],
        }
    }
}

impl EncoderConfig {
    pub fn subsampling(&self) -> usize {
        self.conv_strides.iter().product()
    }

    /// Shape-level problems; cross-module checks (stride product vs. align
    /// factor, vocab vs. quantizer) are done by the caller.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, val) in [
            ("in_dim", self.in_dim),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
        ] {
            if val == 0 {
                v.push(alloc::format!("encoder.{name} must be >= 1"));
            }
        }
        if self.conv_strides.is_empty() || self.conv_strides.contains(&0) {
            v.push(alloc::format!(
                "encoder.conv_strides must be non-empty and positive, got {:?}",
                self.conv_strides
            ));
        }
        if let Some(&max) = self.conv_strides.iter().max() {
            if self.conv_kernel < max {
                v.push(alloc::format!(
                    "encoder.conv_kernel ({}) must be >= every stride (max {max})",
                    self.conv_kernel
                ));
            }
        }
        v
    }

    /// Output frames for `frames` input frames: `⌊frames / Π strides⌋`.
    pub fn output_len(&self, frames: usize) -> usize {
        self.conv_strides.iter().fold(frames, |len, s| len / s)
    }
}

/// Named encoder tensors in a fixed order. `decay` marks tensors that
/// receive decoupled weight decay (weights, not biases or norm parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    names: Vec<String>,
    decay: Vec<bool>,
    values: Vec<Matrix>,
}

impl EncoderParams {
    /// Seeded init: weights `N(0, 1/fan_in)`, biases 0, norm gains 1.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        let (_, specs) = layout(cfg);
        let mut rng = Rng::seed_from_u64(seed);
        let mut gauss = GaussianStream::new(&mut rng);
        let mut out = Self {
            names: Vec::new(),
            decay: Vec::new(),
            values: Vec::new(),
        };
        for spec in specs {
            let data = match spec.init {
                Init::Zeros => alloc::vec![0.0; spec.rows * spec.cols],
                Init::Ones => alloc::vec![1.0; spec.rows * spec.cols],
                Init::Normal { fan_in } => {
                    let std = libm::sqrt(1.0 / fan_in as f64);
                    (0..spec.rows * spec.cols)
                        .map(|_| (gauss.sample() * std) as f32 as f64)
                        .collect()
                }
            };
            out.names.push(spec.name);
            out.decay.push(spec.decay);
            out.values
                .push(Matrix::from_vec(spec.rows, spec.cols, data));
        }
        out
    }

    /// Rebuilds from stored tensors, checking names and shapes against the layout.
    pub fn from_tensors(
        cfg: &EncoderConfig,
        tensors: Vec<(String, Matrix)>,
    ) -> Result<Self, ModelError> {
        let (_, specs) = layout(cfg);
        if specs.len() != tensors.len() {
            return Err(ModelError::LayoutMismatch(alloc::format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        let mut out = Self {
            names: Vec::new(),
            decay: Vec::new(),
            values: Vec::new(),
        };
        for (spec, (name, m)) in specs.into_iter().zip(tensors) {
            if spec.name != name || m.shape() != (spec.rows, spec.cols) {
                return Err(ModelError::LayoutMismatch(alloc::format!(
                    "expected {} {}x{}, got {} {}x{}",
                    spec.name,
                    spec.rows,
                    spec.cols,
                    name,
                    m.rows(),
                    m.cols()
                )));
            }
            out.names.push(name);
            out.decay.push(spec.decay);
            out.values.push(m);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn decays(&self, i: usize) -> bool {
        self.decay[i]
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.index_of(name).map(move |i| &mut self.values[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

enum Init {
    Zeros,
    Ones,
    Normal { fan_in: usize },
}

struct ParamSpec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
    decay: bool,
}

struct ConvIds {
    w: usize,
    b: usize,
    stride: usize,
}

struct AttnIds {
    ln: (usize, usize),
    q: (usize, usize),
    k: (usize, usize),
    v: (usize, usize),
    o: (usize, usize),
}

struct BlockIds {
    attn: Option<AttnIds>,
    ln: (usize, usize),
    w1: (usize, usize),
    w2: (usize, usize),
}

/// Parameter indices for one encoder configuration.
pub struct Encoder {
    cfg: EncoderConfig,
    convs: Vec<ConvIds>,
    blocks: Vec<BlockIds>,
    ln_f: (usize, usize),
    head: (usize, usize),
}

struct Registry {
    specs: Vec<ParamSpec>,
}

impl Registry {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init, decay: bool) -> usize {
        self.specs.push(ParamSpec {
            name,
            rows,
            cols,
            init,
            decay,
        });
        self.specs.len() - 1
    }

    fn linear(
        &mut self,
        prefix: &str,
        w: &str,
        b: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> (usize, usize) {
        let wi = self.add(
            alloc::format!("{prefix}.{w}"),
            fan_in,
            fan_out,
            Init::Normal { fan_in },
            true,
        );
        let bi = self.add(
            alloc::format!("{prefix}.{b}"),
            1,
            fan_out,
            Init::Zeros,
            false,
        );
        (wi, bi)
    }

    fn norm(&mut self, prefix: &str, width: usize) -> (usize, usize) {
        let g = self.add(alloc::format!("{prefix}.g"), 1, width, Init::Ones, false);
        let b = self.add(alloc::format!("{prefix}.b"), 1, width, Init::Zeros, false);
        (g, b)
    }
}

fn layout(cfg: &EncoderConfig) -> (Encoder, Vec<ParamSpec>) {
    let mut reg = Registry { specs: Vec::new() };
    let mut convs = Vec::new();
    let mut cin = cfg.in_dim;
    for (i, &stride) in cfg.conv_strides.iter().enumerate() {
        let fan_in = cfg.conv_kernel * cin;
        let w = reg.add(
            alloc::format!("enc.conv{i}.w"),
            cfg.d_model,
            fan_in,
            Init::Normal { fan_in },
            true,
        );
        let b = reg.add(
            alloc::format!("enc.conv{i}.b"),
            1,
            cfg.d_model,
            Init::Zeros,
            false,
        );
        convs.push(ConvIds { w, b, stride });
        cin = cfg.d_model;
    }
    let d = cfg.d_model;
    let mut blocks = Vec::new();
    for i in 0..cfg.n_blocks {
        let p = alloc::format!("enc.block{i}");
        let attn = match cfg.block_kind {
            BlockKind::Ffn => None,
            BlockKind::AttentionFfn => {
                let a = alloc::format!("{p}.attn");
                Some(AttnIds {
                    ln: reg.norm(&alloc::format!("{p}.ln_attn"), d),
                    q: reg.linear(&a, "wq", "bq", d, d),
                    k: reg.linear(&a, "wk", "bk", d, d),
                    v: reg.linear(&a, "wv", "bv", d, d),
                    o: reg.linear(&a, "wo", "bo", d, d),
                })
            }
        };
        let ln = reg.norm(&alloc::format!("{p}.ln_ffn"), d);
        let f = alloc::format!("{p}.ffn");
        let w1 = reg.linear(&f, "w1", "b1", d, cfg.d_ff);
        let w2 = reg.linear(&f, "w2", "b2", cfg.d_ff, d);
        blocks.push(BlockIds { attn, ln, w1, w2 });
    }
    let ln_f = reg.norm("enc.ln_f", d);
    let head = reg.linear("head", "w", "b", d, cfg.vocab);
    (
        Encoder {
            cfg: cfg.clone(),
            convs,
            blocks,
            ln_f,
            head,
        },
        reg.specs,
    )
}

/// `pe[pos][2i] = sin(pos / 10000^(2i/d))`, `pe[pos][2i+1] = cos(…)`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Matrix {
    let mut pe = Matrix::zeros(len, d);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) * 2;
            let angle = pos as f64 / libm::pow(10_000.0, pair as f64 / d as f64);
            pe.set(
                pos,
                i,
                if i % 2 == 0 {
                    libm::sin(angle)
                } else {
                    libm::cos(angle)
                },
            );
        }
    }
    pe
}

pub fn mel_to_matrix(mel: &MelSpectrogram) -> Matrix {
    Matrix::from_vec(
        mel.num_frames(),
        mel.n_mels,
        mel.frames.iter().map(|&v| v as f64).collect(),
    )
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig) -> Self {
        layout(cfg).0
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn param_names(cfg: &EncoderConfig) -> Vec<String> {
        layout(cfg).1.into_iter().map(|s| s.name).collect()
    }

    pub fn check_params(&self, params: &EncoderParams) -> Result<(), ModelError> {
        let (_, specs) = layout(&self.cfg);
        if specs.len() != params.len() {
            return Err(ModelError::LayoutMismatch(alloc::format!(
                "expected {} tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, (n, v)) in specs.iter().zip(params.names.iter().zip(&params.values)) {
            if &s.name != n || v.shape() != (s.rows, s.cols) {
                return Err(ModelError::LayoutMismatch(n.to_string()));
            }
        }
        Ok(())
    }

    /// Records the forward pass on `tape` and returns the `W × vocab` logits node.
    pub fn forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        input: &MelSpectrogram,
    ) -> Result<ValueId, ModelError> {
        if input.n_mels != self.cfg.in_dim {
            return Err(ModelError::DimMismatch {
                expected: self.cfg.in_dim,
                got: input.n_mels,
            });
        }
        let frames = input.num_frames();
        if self.cfg.output_len(frames) == 0 {
            return Err(ModelError::TooShort {
                frames,
                min: self.cfg.subsampling(),
            });
        }
        let mut x = tape.input(mel_to_matrix(input));
        let kernel = self.cfg.conv_kernel;
        for conv in &self.convs {
            // Total padding kernel − stride makes each layer output ⌊L/stride⌋.
            let pad = kernel - conv.stride;
            let pad_left = pad.div_ceil(2);
            let (w, b) = (tape.param(conv.w), tape.param(conv.b));
            x = tape.conv1d(x, w, b, conv.stride, pad_left, pad - pad_left);
            x = tape.gelu(x);
        }
        let pe = sinusoidal_positions(tape.value(x).rows(), self.cfg.d_model);
        x = tape.add_const(x, &pe);
        let attn_scale = 1.0 / libm::sqrt(self.cfg.d_model as f64);
        for block in &self.blocks {
            if let Some(a) = &block.attn {
                let h = norm(tape, x, a.ln);
                let q = linear(tape, h, a.q);
                let k = linear(tape, h, a.k);
                let v = linear(tape, h, a.v);
                let scores = tape.matmul_t(q, k);
                let scores = tape.scale(scores, attn_scale);
                let probs = tape.softmax_rows(scores);
                let ctx = tape.matmul(probs, v);
                let out = linear(tape, ctx, a.o);
                x = tape.add(x, out);
            }
            let h = norm(tape, x, block.ln);
            let h = linear(tape, h, block.w1);
            let h = tape.gelu(h);
            let h = linear(tape, h, block.w2);
            x = tape.add(x, h);
        }
        let h = norm(tape, x, self.ln_f);
        Ok(linear(tape, h, self.head))
    }

    /// Forward pass returning only the logits.
    pub fn logits(
        &self,
        params: &EncoderParams,
        input: &MelSpectrogram,
    ) -> Result<Matrix, ModelError> {
        let mut tape = Tape::new(params.values());
        let out = self.forward(&mut tape, input)?;
        Ok(tape.value(out).clone())
    }
}

fn linear(tape: &mut Tape, x: ValueId, (w, b): (usize, usize)) -> ValueId {
    let (w, b) = (tape.param(w), tape.param(b));
    tape.linear(x, w, b)
}

fn norm(tape: &mut Tape, x: ValueId, (g, b): (usize, usize)) -> ValueId {
    let (g, b) = (tape.param(g), tape.param(b));
    tape.layer_norm(x, g, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn mel(frames: usize, dim: usize, seed: u64) -> MelSpectrogram {
        let mut rng = Rng::seed_from_u64(seed);
        let data = (0..frames * dim)
            .map(|_| rng.uniform_range(-10.0, 2.0) as f32)
            .collect();
        MelSpectrogram::from_frames(data, dim, 10.0, "u")
    }

    #[test]
    fn eighty_frames_give_ten_outputs() {
        let cfg = EncoderConfig {
            vocab: 32,
            ..Default::default()
        };
        let enc = Encoder::new(&cfg);
        let params = EncoderParams::init(&cfg, 1);
        let logits = enc.logits(&params, &mel(80, 80, 2)).unwrap();
        assert_eq!(logits.shape(), (10, 32));
        assert!(logits.is_finite());
        for t in 8..200 {
            assert_eq!(cfg.output_len(t), t / 8);
        }
        assert_eq!(enc.logits(&params, &mel(83, 80, 2)).unwrap().rows(), 10);
    }

    #[test]
    fn too_short_and_wrong_width() {
        let cfg = EncoderConfig {
            vocab: 8,
            ..Default::default()
        };
        let enc = Encoder::new(&cfg);
        let params = EncoderParams::init(&cfg, 1);
        assert!(matches!(
            enc.logits(&params, &mel(7, 80, 1)),
            Err(ModelError::TooShort { .. })
        ));
        assert!(matches!(
            enc.logits(&params, &mel(16, 40, 1)),
            Err(ModelError::DimMismatch { .. })
        ));
    }

    #[test]
    fn dead_network_outputs_head_bias() {
        for kind in [BlockKind::Ffn, BlockKind::AttentionFfn] {
            let cfg = EncoderConfig {
                vocab: 6,
                block_kind: kind,
                ..Default::default()
            };
            let enc = Encoder::new(&cfg);
            let mut params = EncoderParams::init(&cfg, 3);
            for m in params.values_mut() {
                m.as_mut_slice().fill(0.0);
            }
            let bias = [0.5, -1.0, 2.0, 0.0, 3.5, -0.25];
            params
                .get_mut("head.b")
                .unwrap()
                .as_mut_slice()
                .copy_from_slice(&bias);
            let logits = enc.logits(&params, &mel(40, 80, 4)).unwrap();
            for r in 0..logits.rows() {
                assert_eq!(logits.row(r), &bias);
            }
        }
    }

    #[test]
    fn names_are_unique_and_dotted() {
        let cfg = EncoderConfig {
            block_kind: BlockKind::AttentionFfn,
            ..Default::default()
        };
        let names = Encoder::param_names(&cfg);
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        for n in [
            "enc.conv0.w",
            "enc.conv2.b",
            "enc.block1.ffn.w1",
            "enc.block0.attn.wq",
            "head.w",
        ] {
            assert!(names.iter().any(|x| x == n), "{n}");
        }
    }

    #[test]
    fn init_is_seeded_and_f32_exact() {
        let cfg = EncoderConfig::default();
        let a = EncoderParams::init(&cfg, 5);
        assert_eq!(a, EncoderParams::init(&cfg, 5));
        assert_ne!(a, EncoderParams::init(&cfg, 6));
        for m in a.values() {
            assert!(m.as_slice().iter().all(|&v| (v as f32) as f64 == v));
        }
        assert!(!a.decays(a.index_of("head.b").unwrap()));
        assert!(a.decays(a.index_of("head.w").unwrap()));
    }

    #[test]
    fn utterances_do_not_leak_into_each_other() {
        let cfg = EncoderConfig {
            vocab: 16,
            block_kind: BlockKind::AttentionFfn,
            ..Default::default()
        };
        let enc = Encoder::new(&cfg);
        let params = EncoderParams::init(&cfg, 7);
        let (a, b) = (mel(64, 80, 1), mel(48, 80, 2));
        let first: Vec<Matrix> = [&a, &b]
            .iter()
            .map(|m| enc.logits(&params, m).unwrap())
            .collect();
        let swapped: Vec<Matrix> = [&b, &a]
            .iter()
            .map(|m| enc.logits(&params, m).unwrap())
            .collect();
        assert_eq!(first[0], swapped[1]);
        assert_eq!(first[1], swapped[0]);
    }

    #[test]
    fn stride_validation() {
        let cfg = EncoderConfig {
            conv_kernel: 1,
            conv_strides: vec![2, 0],
            ..Default::default()
        };
        assert_eq!(cfg.violations().len(), 2);
    }
}
