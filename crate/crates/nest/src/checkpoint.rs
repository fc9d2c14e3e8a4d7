//! Binary checkpoint format.
//!
//! ```text
//! "NESTCKPT"  u32 version  u32 tensor_count
//! per tensor: u16 name_len, name (UTF-8), u8 rank, rank x u32 dims, f32 payload
//! u64 step, 4 x u64 RNG state, u32 CRC32 of every preceding byte
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use nest_core::model::{EncoderConfig, EncoderParams, ModelError};
use nest_core::quantizer::{Quantizer, QuantizerConfig, QuantizerError};
use nest_core::train::{AdamW, TrainState};
use nest_core::{Matrix, Rng};

pub const MAGIC: &[u8; 8] = b"NESTCKPT";
pub const VERSION: u32 = 1;

pub const PROJECTION: &str = "quant.projection";
pub const CODEBOOK: &str = "quant.codebook";
const QUANT_SEED: &str = "quant.seed";
const CONFIG_HASH: &str = "run.config_crc";
const OPT_UPDATES: &str = "opt.updates";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    IoError(#[from] std::io::Error),
    #[error("checkpoint version {found} is not supported (expected {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("checkpoint checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint was written with a different run configuration")]
    ConfigMismatch,
    #[error("checkpoint tensor {0} is missing")]
    MissingTensor(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            dims: vec![m.rows() as u32, m.cols() as u32],
            data: m.as_slice().iter().map(|&x| x as f32).collect(),
        }
    }

    /// Rank-1 tensor carrying a `u64` as four 16-bit limbs, each exact in f32.
    pub fn from_u64(name: impl Into<String>, v: u64) -> Self {
        let data = (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect();
        Self {
            name: name.into(),
            dims: vec![4],
            data,
        }
    }

    pub fn to_u64(&self) -> Result<u64, CheckpointError> {
        if self.data.len() != 4
            || self
                .data
                .iter()
                .any(|&x| !(0.0..65536.0).contains(&x) || x.fract() != 0.0)
        {
            return Err(CheckpointError::Malformed(format!(
                "{} is not a u64 tensor",
                self.name
            )));
        }
        Ok(self
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| (x as u64) << (16 * i))
            .sum())
    }

    pub fn to_matrix(&self) -> Result<Matrix, CheckpointError> {
        let (rows, cols) = match self.dims[..] {
            [r, c] => (r as usize, c as usize),
            [n] => (1, n as usize),
            _ => {
                return Err(CheckpointError::Malformed(format!(
                    "{} has rank {}",
                    self.name,
                    self.dims.len()
                )))
            }
        };
        Ok(Matrix::from_vec(
            rows,
            cols,
            self.data.iter().map(|&x| f64::from(x)).collect(),
        ))
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor>,
    pub step: u64,
    pub rng_state: [u64; 4],
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.into()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(
            &u32::try_from(self.tensors.len())
                .map_err(too_big)?
                .to_le_bytes(),
        );
        for t in &self.tensors {
            if t.numel() != t.data.len() {
                return Err(CheckpointError::Malformed(format!(
                    "{}: dims {:?} but {} values",
                    t.name,
                    t.dims,
                    t.data.len()
                )));
            }
            out.extend_from_slice(&u16::try_from(t.name.len()).map_err(too_big)?.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(u8::try_from(t.dims.len()).map_err(too_big)?);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        for s in self.rng_state {
            out.extend_from_slice(&s.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Magic and version are checked first, then the checksum, then the structure.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::Malformed("missing NESTCKPT header".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch { found: version });
        }
        if bytes.len() < 12 + 4 + 8 + 32 + 4 {
            return Err(CheckpointError::Malformed("truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::ChecksumMismatch { stored, computed });
        }

        let mut r = Reader { buf: body, pos: 12 };
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let numel = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
            let numel = numel.filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()));
            let numel = numel.ok_or_else(|| {
                CheckpointError::Malformed(format!("{name}: dims {dims:?} exceed file"))
            })?;
            let data = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor { name, dims, data });
        }
        let step = r.u64()?;
        let mut rng_state = [0u64; 4];
        for s in &mut rng_state {
            *s = r.u64()?;
        }
        if r.remaining() != 0 {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                r.remaining()
            )));
        }
        Ok(Self {
            tensors,
            step,
            rng_state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Snapshot of a training state. `config_hash` ties the file to the run
    /// configuration that produced it.
    pub fn from_state(state: &TrainState, config_hash: u64) -> Self {
        let q = state.quantizer();
        let qc = q.config();
        let mut tensors = Vec::new();
        for (name, m) in state.params.names().iter().zip(state.params.values()) {
            tensors.push(Tensor::from_matrix(name.clone(), m));
        }
        tensors.push(Tensor {
            name: PROJECTION.into(),
            dims: vec![qc.in_dim as u32, qc.code_dim as u32],
            data: q.projection().to_vec(),
        });
        tensors.push(Tensor {
            name: CODEBOOK.into(),
            dims: vec![qc.vocab as u32, qc.code_dim as u32],
            data: q.codebook().to_vec(),
        });
        tensors.push(Tensor::from_u64(QUANT_SEED, qc.seed));
        for (name, m) in state.params.names().iter().zip(&state.optimizer.m) {
            tensors.push(Tensor::from_matrix(format!("opt.m.{name}"), m));
        }
        for (name, v) in state.params.names().iter().zip(&state.optimizer.v) {
            tensors.push(Tensor::from_matrix(format!("opt.v.{name}"), v));
        }
        tensors.push(Tensor::from_u64(OPT_UPDATES, state.optimizer.updates));
        tensors.push(Tensor::from_u64(CONFIG_HASH, config_hash));
        Self {
            tensors,
            step: state.step,
            rng_state: state.rng.state(),
        }
    }

    /// Rebuilds the training state, refusing a checkpoint from another configuration.
    pub fn into_state(
        &self,
        encoder: &EncoderConfig,
        quantizer: &QuantizerConfig,
        config_hash: u64,
    ) -> Result<TrainState, CheckpointError> {
        if self.tensor(CONFIG_HASH)?.to_u64()? != config_hash {
            return Err(CheckpointError::ConfigMismatch);
        }
        let names = nest_core::model::Encoder::param_names(encoder);
        let collect = |prefix: &str| -> Result<Vec<(String, Matrix)>, CheckpointError> {
            names
                .iter()
                .map(|n| {
                    Ok((
                        n.clone(),
                        self.tensor(&format!("{prefix}{n}"))?.to_matrix()?,
                    ))
                })
                .collect()
        };
        let params = EncoderParams::from_tensors(encoder, collect("")?)?;
        let m = collect("opt.m.")?;
        let v = collect("opt.v.")?;
        for ((name, a), (_, b)) in m.iter().zip(&v) {
            let p = params.get(name).expect("names come from the same config");
            if a.shape() != p.shape() || b.shape() != p.shape() {
                return Err(CheckpointError::Malformed(format!(
                    "optimizer moments for {name} have the wrong shape"
                )));
            }
        }
        let optimizer = AdamW {
            m: m.into_iter().map(|(_, x)| x).collect(),
            v: v.into_iter().map(|(_, x)| x).collect(),
            updates: self.tensor(OPT_UPDATES)?.to_u64()?,
        };
        let quant = self.quantizer(quantizer)?;
        Ok(TrainState::from_parts(
            encoder,
            params,
            optimizer,
            self.step,
            Rng::from_state(self.rng_state),
            quant,
        ))
    }

    pub fn quantizer(&self, cfg: &QuantizerConfig) -> Result<Quantizer, CheckpointError> {
        let mut cfg = cfg.clone();
        cfg.seed = self.tensor(QUANT_SEED)?.to_u64()?;
        Ok(Quantizer::from_parts(
            cfg,
            self.tensor(PROJECTION)?.data.clone(),
            self.tensor(CODEBOOK)?.data.clone(),
        )?)
    }
}

fn too_big<E>(_: E) -> CheckpointError {
    CheckpointError::Malformed("field exceeds its on-disk width".into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if n > self.remaining() {
            return Err(CheckpointError::Malformed("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
