//! The TOML run configuration and its load-time validation.

use std::path::{Path, PathBuf};

use nest_core::model::EncoderConfig;
use nest_core::quantizer::QuantizerConfig;
use nest_core::train::{PipelineConfig, TrainConfig};
use nest_core::{AlignConfig, AugmentConfig, MaskConfig, MelConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: PathBuf,
    pub noise_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            manifest: "data/manifest.jsonl".into(),
            noise_dir: None,
            out_dir: "runs/default".into(),
        }
    }
}

/// Run bookkeeping that does not influence the numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Write `step{N}.ckpt` every this many steps (0: only first and last).
    pub checkpoint_every: u64,
    /// Info-level progress line every this many steps (0: never).
    pub log_every: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

/// Parameters of the constant-tone toy corpus written by `synth-data`.
///
/// Under the default seed-42 quantizer pure tones only ever reach four
/// tokens; the default tones hit each of them twice so the most frequent
/// target covers a quarter of the windows rather than half.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub utterances: usize,
    pub tones_hz: Vec<f64>,
    pub duration_s: f64,
    pub amplitude: f64,
    pub noise_clips: usize,
    pub noise_duration_s: f64,
    pub noise_amplitude: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            utterances: 64,
            tones_hz: vec![300.0, 500.0, 700.0, 950.0, 1200.0, 1870.0, 1920.0, 3000.0],
            duration_s: 1.0,
            amplitude: 0.5,
            noise_clips: 4,
            noise_duration_s: 2.0,
            noise_amplitude: 0.3,
        }
    }
}

/// Settings for the diagnostic subcommands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsSection {
    pub mask_stats_frames: usize,
    pub mask_stats_trials: usize,
    pub grad_check_coordinates: usize,
    pub grad_check_eps: f64,
    pub grad_check_tolerance: f64,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            mask_stats_frames: 4000,
            mask_stats_trials: 200,
            grad_check_coordinates: 50,
            grad_check_eps: 1e-4,
            grad_check_tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub mel: MelConfig,
    pub mask: MaskConfig,
    pub augment: AugmentConfig,
    pub align: AlignConfig,
    pub quantizer: QuantizerConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub run: RunSection,
    pub synth: SynthSection,
    pub diagnostics: DiagnosticsSection,
}

/// Every violated constraint, not just the first.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid configuration:\n  - {}", .problems.join("\n  - "))]
pub struct ConfigValidationError {
    pub problems: Vec<String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigValidationError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigValidationError {
            problems: vec![e.to_string()],
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigValidationError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigValidationError {
            problems: vec![format!("cannot read {}: {e}", path.display())],
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), ConfigValidationError> {
        let mut p = Vec::new();
        p.extend(self.mel.violations());
        p.extend(self.mask.violations());
        p.extend(self.augment.violations());
        p.extend(self.align.violations());
        p.extend(self.quantizer.violations());
        p.extend(self.encoder.violations());
        p.extend(self.train.violations());

        let product = self.encoder.subsampling();
        if product != self.align.factor {
            p.push(format!(
                "encoder.conv_strides {:?} subsample by {product} but align.factor is {}; they must agree",
                self.encoder.conv_strides, self.align.factor
            ));
        }
        if self.encoder.vocab != self.quantizer.vocab {
            p.push(format!(
                "encoder.vocab ({}) must equal quantizer.vocab ({})",
                self.encoder.vocab, self.quantizer.vocab
            ));
        }
        if self.quantizer.in_dim != self.mel.n_mels {
            p.push(format!(
                "quantizer.in_dim ({}) must equal mel.n_mels ({})",
                self.quantizer.in_dim, self.mel.n_mels
            ));
        }
        if self.encoder.in_dim != self.mel.n_mels {
            p.push(format!(
                "encoder.in_dim ({}) must equal mel.n_mels ({})",
                self.encoder.in_dim, self.mel.n_mels
            ));
        }

        let s = &self.synth;
        if s.tones_hz.is_empty() {
            p.push("synth.tones_hz must not be empty".into());
        }
        let nyquist = f64::from(nest_core::signal::SAMPLE_RATE) / 2.0;
        for &f in &s.tones_hz {
            if !(f > 0.0 && f < nyquist) {
                p.push(format!(
                    "synth.tones_hz entries must lie in (0, {nyquist}), got {f}"
                ));
            }
        }
        for (name, v) in [
            ("duration_s", s.duration_s),
            ("noise_duration_s", s.noise_duration_s),
        ] {
            if !(v > 0.0) {
                p.push(format!("synth.{name} must be > 0, got {v}"));
            }
        }
        for (name, v) in [
            ("amplitude", s.amplitude),
            ("noise_amplitude", s.noise_amplitude),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                p.push(format!("synth.{name} must lie in (0, 1], got {v}"));
            }
        }

        let d = &self.diagnostics;
        if d.mask_stats_trials == 0 {
            p.push("diagnostics.mask_stats_trials must be >= 1".into());
        }
        if d.mask_stats_frames < self.mask.l_m {
            p.push(format!(
                "diagnostics.mask_stats_frames ({}) must be >= mask.l_m ({})",
                d.mask_stats_frames, self.mask.l_m
            ));
        }
        if !(d.grad_check_eps > 0.0) {
            p.push(format!(
                "diagnostics.grad_check_eps must be > 0, got {}",
                d.grad_check_eps
            ));
        }
        if !(d.grad_check_tolerance > 0.0) {
            p.push(format!(
                "diagnostics.grad_check_tolerance must be > 0, got {}",
                d.grad_check_tolerance
            ));
        }

        if p.is_empty() {
            Ok(())
        } else {
            Err(ConfigValidationError { problems: p })
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            mel: self.mel.clone(),
            mask: self.mask.clone(),
            augment: self.augment.clone(),
            align: self.align.clone(),
        }
    }

    /// CRC32 of every setting that shapes the training trajectory. Paths,
    /// the step budget and bookkeeping are excluded so a run can be resumed
    /// elsewhere or extended.
    pub fn fingerprint(&self) -> u64 {
        let mut c = self.clone();
        c.paths = Paths::default();
        c.train.total_steps = 0;
        c.run = RunSection::default();
        c.synth = SynthSection::default();
        c.diagnostics = DiagnosticsSection::default();
        u64::from(crc32fast::hash(
            serde_json::to_string(&c).expect("serializable").as_bytes(),
        ))
    }
}
