//! Waveforms, synthetic test signals and log-mel featurization.

mod fft;
mod mel;

pub use mel::{
    hz_to_mel, mel_center_frequencies, mel_spectrogram, mel_to_hz, Featurizer, MelConfig,
    MelSpectrogram,
};

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::rng::Rng;

/// The only accepted sample rate. Audio at any other rate is rejected, never resampled.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SignalError {
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
    #[error("waveform has {samples} samples, shorter than one {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("sample rate {0} Hz is not supported (expected 16000)")]
    SampleRate(u32),
    #[error("invalid mel config: {0}")]
    InvalidConfig(String),
}

/// Mono audio at 16 kHz with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub speaker_id: Option<String>,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, speaker_id: Option<String>) -> Result<Self, SignalError> {
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(SignalError::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate: SAMPLE_RATE,
            speaker_id,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn with_speaker(mut self, speaker_id: impl Into<String>) -> Self {
        self.speaker_id = Some(speaker_id.into());
        self
    }
}

/// A waveform with its corpus identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub wave: Waveform,
}

impl Utterance {
    pub fn new(id: impl Into<String>, wave: Waveform) -> Self {
        Self {
            id: id.into(),
            wave,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthKind {
    Tone { freq_hz: f64 },
    WhiteNoise,
    Silence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(flatten)]
    pub kind: SynthKind,
    pub duration_s: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_amplitude() -> f64 {
    1.0
}

impl SynthSpec {
    pub fn tone(freq_hz: f64, duration_s: f64, amplitude: f64) -> Self {
        Self {
            kind: SynthKind::Tone { freq_hz },
            duration_s,
            amplitude,
            seed: None,
        }
    }

    pub fn white_noise(duration_s: f64, amplitude: f64, seed: u64) -> Self {
        Self {
            kind: SynthKind::WhiteNoise,
            duration_s,
            amplitude,
            seed: Some(seed),
        }
    }

    pub fn silence(duration_s: f64) -> Self {
        Self {
            kind: SynthKind::Silence,
            duration_s,
            amplitude: 1.0,
            seed: None,
        }
    }
}

/// Generates a deterministic test signal.
///
/// Tones are `amplitude·sin(2π·f·n/16000)`; white noise is i.i.d. uniform in
/// `(-amplitude, amplitude)` from the stream seeded with `spec.seed` (0 when absent).
pub fn synthesize(spec: &SynthSpec) -> Result<Waveform, SignalError> {
    if !(spec.duration_s > 0.0) || !spec.duration_s.is_finite() {
        return Err(SignalError::InvalidSpec(alloc::format!(
            "duration_s must be > 0, got {}",
            spec.duration_s
        )));
    }
    let needs_amplitude = !matches!(spec.kind, SynthKind::Silence);
    if needs_amplitude && !(spec.amplitude > 0.0 && spec.amplitude <= 1.0) {
        return Err(SignalError::InvalidSpec(alloc::format!(
            "amplitude must lie in (0, 1], got {}",
            spec.amplitude
        )));
    }
    let n = libm::round(spec.duration_s * SAMPLE_RATE as f64) as usize;
    let samples = match spec.kind {
        SynthKind::Silence => vec![0.0f32; n],
        SynthKind::Tone { freq_hz } => {
            let nyquist = SAMPLE_RATE as f64 / 2.0;
            if !(freq_hz > 0.0 && freq_hz < nyquist) {
                return Err(SignalError::InvalidSpec(alloc::format!(
                    "tone frequency must lie in (0, 8000) Hz, got {freq_hz}"
                )));
            }
            let w = 2.0 * PI * freq_hz / SAMPLE_RATE as f64;
            (0..n)
                .map(|i| (spec.amplitude * libm::sin(w * i as f64)) as f32)
                .collect()
        }
        SynthKind::WhiteNoise => {
            let mut rng = Rng::seed_from_u64(spec.seed.unwrap_or(0));
            (0..n)
                .map(|_| rng.uniform_range(-spec.amplitude, spec.amplitude) as f32)
                .collect()
        }
    };
    Waveform::new(samples, None)
}
