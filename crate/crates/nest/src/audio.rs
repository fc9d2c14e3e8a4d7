//! 16 kHz mono PCM16 WAV reading and writing.

use std::path::Path;

use nest_core::signal::{SignalError, SAMPLE_RATE};
use nest_core::Waveform;

#[derive(Debug, thiserror::Error)]
pub enum AudioError {
    #[error("{path}: no such file")]
    NotFound { path: String },
    #[error("{path}: {source}")]
    Wav { path: String, source: hound::Error },
    #[error("{path}: expected PCM16 mono {SAMPLE_RATE} Hz, found {bits}-bit {channels}-channel {rate} Hz {format}")]
    UnsupportedFormat {
        path: String,
        bits: u16,
        channels: u16,
        rate: u32,
        format: String,
    },
    #[error("{path}: {source}")]
    Signal { path: String, source: SignalError },
}

/// Reads a PCM16 mono 16 kHz file; samples are scaled by 1/32768.
pub fn read_wav(path: &Path, speaker_id: Option<String>) -> Result<Waveform, AudioError> {
    let name = path.display().to_string();
    if !path.is_file() {
        return Err(AudioError::NotFound { path: name });
    }
    let reader = hound::WavReader::open(path).map_err(|source| AudioError::Wav {
        path: name.clone(),
        source,
    })?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.sample_rate != SAMPLE_RATE
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(AudioError::UnsupportedFormat {
            path: name,
            bits: spec.bits_per_sample,
            channels: spec.channels,
            rate: spec.sample_rate,
            format: format!("{:?}", spec.sample_format).to_lowercase(),
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f32::from(v) / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| AudioError::Wav {
            path: name.clone(),
            source,
        })?;
    Waveform::new(samples, speaker_id).map_err(|source| AudioError::Signal { path: name, source })
}

/// Writes PCM16, clamping to the representable range.
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<(), AudioError> {
    let name = path.display().to_string();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |source| AudioError::Wav {
        path: name.clone(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &wave.samples {
        writer.write_sample(to_pcm16(s)).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

fn to_pcm16(s: f32) -> i16 {
    (f64::from(s) * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm_round_trip_is_exact_on_the_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples: Vec<f32> = [-32768i32, -1, 0, 1, 12345, 32767]
            .iter()
            .map(|&v| v as f32 / 32768.0)
            .collect();
        write_wav(&path, &Waveform::new(samples.clone(), None).unwrap()).unwrap();
        let back = read_wav(&path, Some("s1".into())).unwrap();
        assert_eq!(back.samples, samples);
        assert_eq!(back.speaker_id.as_deref(), Some("s1"));
    }

    #[test]
    fn rejects_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("st.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            read_wav(&path, None),
            Err(AudioError::UnsupportedFormat { channels: 2, .. })
        ));
    }

    fn write_pcm(path: &Path, samples: &[i16]) {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn one_second_of_silence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.wav");
        write_pcm(&path, &[0; 16_000]);
        let w = read_wav(&path, None).unwrap();
        assert_eq!(w.samples.len(), 16_000);
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn full_scale_square_wave_scales_by_2_pow_15() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sq.wav");
        write_pcm(&path, &[32767, -32767, 32767, -32767]);
        let w = read_wav(&path, None).unwrap();
        let v = 32767.0 / 32768.0;
        assert_eq!(w.samples, vec![v, -v, v, -v]);
    }

    #[test]
    fn missing_and_wrong_rate() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_wav(&dir.path().join("nope.wav"), None),
            Err(AudioError::NotFound { .. })
        ));
        let path = dir.path().join("8k.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            read_wav(&path, None),
            Err(AudioError::UnsupportedFormat { rate: 8_000, .. })
        ));
    }

    #[test]
    fn clamps_out_of_range() {
        assert_eq!(to_pcm16(1.5), 32767);
        assert_eq!(to_pcm16(-1.0), -32768);
    }
}
