use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::fft::Fft;
use super::{SignalError, Waveform, SAMPLE_RATE};

/// STFT and filterbank parameters. The hop of 160 samples is 10 ms, so eight
/// input frames make one 80 ms encoder frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_fft: 512,
            win_length: 400,
            hop_length: 160,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    /// Every violated constraint, empty when the config is usable.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !self.n_fft.is_power_of_two() {
            v.push(alloc::format!(
                "mel.n_fft must be a power of two, got {}",
                self.n_fft
            ));
        }
        if self.win_length == 0 || self.win_length > self.n_fft {
            v.push(alloc::format!(
                "mel.win_length must lie in [1, n_fft={}], got {}",
                self.n_fft,
                self.win_length
            ));
        }
        if self.hop_length == 0 {
            v.push("mel.hop_length must be >= 1".into());
        }
        if self.n_mels == 0 {
            v.push("mel.n_mels must be >= 1".into());
        }
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= nyquist) {
            v.push(alloc::format!(
                "mel frequency range must satisfy 0 <= fmin < fmax <= {nyquist}, got [{}, {}]",
                self.fmin,
                self.fmax
            ));
        }
        if !(self.log_floor > 0.0) {
            v.push(alloc::format!(
                "mel.log_floor must be > 0, got {}",
                self.log_floor
            ));
        }
        v
    }

    /// Number of frames for `num_samples` samples (no centering or padding).
    pub fn num_frames(&self, num_samples: usize) -> usize {
        if num_samples < self.win_length {
            0
        } else {
            1 + (num_samples - self.win_length) / self.hop_length
        }
    }

    pub fn hop_ms(&self) -> f32 {
        (self.hop_length as f64 * 1000.0 / SAMPLE_RATE as f64) as f32
    }
}

/// `T × n_mels` natural-log mel energies, row-major by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Vec<f32>,
    pub n_mels: usize,
    pub hop_ms: f32,
    pub source_id: String,
}

impl MelSpectrogram {
    pub fn from_frames(
        frames: Vec<f32>,
        n_mels: usize,
        hop_ms: f32,
        source_id: impl Into<String>,
    ) -> Self {
        assert!(
            n_mels > 0 && frames.len().is_multiple_of(n_mels),
            "frame buffer is not a multiple of n_mels"
        );
        Self {
            frames,
            n_mels,
            hop_ms,
            source_id: source_id.into(),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len() / self.n_mels
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.frames[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn iter_frames(&self) -> impl Iterator<Item = &[f32]> {
        self.frames.chunks_exact(self.n_mels)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * libm::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (libm::pow(10.0, mel / 2595.0) - 1.0)
}

/// The `n_mels + 2` filter edge frequencies, equally spaced on the HTK mel scale.
fn mel_edges(cfg: &MelConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + step * i as f64))
        .collect()
}

/// Peak frequency of each triangular filter.
pub fn mel_center_frequencies(cfg: &MelConfig) -> Vec<f64> {
    let edges = mel_edges(cfg);
    edges[1..=cfg.n_mels].to_vec()
}

struct Filter {
    first_bin: usize,
    weights: Vec<f64>,
}

/// Precomputed window, FFT plan and filterbank; reuse it across utterances.
pub struct Featurizer {
    cfg: MelConfig,
    window: Vec<f64>,
    fft: Fft,
    filters: Vec<Filter>,
    log_floor_ln: f32,
}

impl Featurizer {
    pub fn new(cfg: &MelConfig) -> Result<Self, SignalError> {
        let errs = cfg.violations();
        if !errs.is_empty() {
            return Err(SignalError::InvalidConfig(errs.join("; ")));
        }
        // Periodic Hann window, zero-padded to n_fft at the tail.
        let window = (0..cfg.win_length)
            .map(|n| 0.5 - 0.5 * libm::cos(2.0 * PI * n as f64 / cfg.win_length as f64))
            .collect();
        let n_bins = cfg.n_fft / 2 + 1;
        let bin_hz = SAMPLE_RATE as f64 / cfg.n_fft as f64;
        let edges = mel_edges(cfg);
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
                // Unit area measured on the mel axis, where every triangle
                // has the same base; the shape is interpolated linearly in Hz.
                let height = 2.0 / (hz_to_mel(right) - hz_to_mel(left));
                let mut first_bin = None;
                let mut weights = Vec::new();
                for k in 0..n_bins {
                    let f = k as f64 * bin_hz;
                    let w = if f > left && f <= center {
                        (f - left) / (center - left)
                    } else if f > center && f < right {
                        (right - f) / (right - center)
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        first_bin.get_or_insert(k);
                        weights.push(w * height);
                    } else if first_bin.is_some() {
                        break;
                    }
                }
                Filter {
                    first_bin: first_bin.unwrap_or(0),
                    weights,
                }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            window,
            fft: Fft::new(cfg.n_fft),
            filters,
            log_floor_ln: libm::log(cfg.log_floor) as f32,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Power spectrum `|X_k|²`, `k = 0..=n_fft/2`, of the frame starting at `offset`.
    pub fn power_spectrum(&self, samples: &[f32], offset: usize) -> Vec<f64> {
        let n = self.cfg.n_fft;
        let mut re = vec![0.0; n];
        let mut im = vec![0.0; n];
        for (i, w) in self.window.iter().enumerate() {
            re[i] = samples[offset + i] as f64 * w;
        }
        self.fft.forward(&mut re, &mut im);
        (0..=n / 2).map(|k| re[k] * re[k] + im[k] * im[k]).collect()
    }

    /// Filterbank energies (before the log) for one power spectrum.
    pub fn mel_energies(&self, power: &[f64]) -> Vec<f64> {
        self.filters
            .iter()
            .map(|f| {
                f.weights
                    .iter()
                    .zip(&power[f.first_bin..])
                    .map(|(w, p)| w * p)
                    .sum()
            })
            .collect()
    }

    pub fn compute(&self, wav: &Waveform, source_id: &str) -> Result<MelSpectrogram, SignalError> {
        let n = wav.samples.len();
        if n < self.cfg.win_length {
            return Err(SignalError::TooShort {
                samples: n,
                window: self.cfg.win_length,
            });
        }
        let t = self.cfg.num_frames(n);
        let mut frames = Vec::with_capacity(t * self.cfg.n_mels);
        for i in 0..t {
            let power = self.power_spectrum(&wav.samples, i * self.cfg.hop_length);
            for e in self.mel_energies(&power) {
                let v = libm::log(if e > self.cfg.log_floor {
                    e
                } else {
                    self.cfg.log_floor
                }) as f32;
                frames.push(v.max(self.log_floor_ln));
            }
        }
        Ok(MelSpectrogram::from_frames(
            frames,
            self.cfg.n_mels,
            self.cfg.hop_ms(),
            source_id,
        ))
    }
}

/// One-shot featurization. Prefer a shared [`Featurizer`] in loops.
pub fn mel_spectrogram(wav: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram, SignalError> {
    Featurizer::new(cfg)?.compute(wav, "")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{synthesize, SynthSpec};

    #[test]
    fn silence_sits_on_the_floor() {
        let wav = synthesize(&SynthSpec::silence(0.1)).unwrap();
        let mel = mel_spectrogram(&wav, &MelConfig::default()).unwrap();
        let floor = libm::log(1e-10) as f32;
        assert!(mel.frames.iter().all(|&v| v == floor));
    }

    #[test]
    fn one_second_gives_98_frames() {
        let wav = synthesize(&SynthSpec::tone(440.0, 1.0, 0.5)).unwrap();
        let mel = mel_spectrogram(&wav, &MelConfig::default()).unwrap();
        assert_eq!(mel.num_frames(), 98);
        assert_eq!(mel.n_mels, 80);
        assert_eq!(mel.hop_ms, 10.0);
    }

    #[test]
    fn too_short_is_an_error() {
        let wav = Waveform::new(vec![0.0; 399], None).unwrap();
        assert_eq!(
            mel_spectrogram(&wav, &MelConfig::default()),
            Err(SignalError::TooShort {
                samples: 399,
                window: 400
            })
        );
        let wav = Waveform::new(vec![0.0; 400], None).unwrap();
        assert_eq!(
            mel_spectrogram(&wav, &MelConfig::default())
                .unwrap()
                .num_frames(),
            1
        );
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 100.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-8);
        }
        assert!((hz_to_mel(1000.0) - 1000.0).abs() < 0.1);
    }

    #[test]
    fn every_filter_reaches_a_bin() {
        let f = Featurizer::new(&MelConfig::default()).unwrap();
        assert!(f.filters.iter().all(|flt| !flt.weights.is_empty()));
    }

    #[test]
    fn invalid_config_lists_all_problems() {
        let cfg = MelConfig {
            n_fft: 500,
            n_mels: 0,
            log_floor: 0.0,
            ..MelConfig::default()
        };
        assert_eq!(cfg.violations().len(), 3);
    }
}
