//! JSON-lines corpus index: one `{"audio_filepath", "duration", "speaker_id"}`
//! object per line. Relative paths resolve against the manifest's directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nest_core::signal::Utterance;
use nest_core::train::{epoch_batches, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, AudioError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub audio_filepath: String,
    pub duration: f64,
    pub speaker_id: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest {path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("manifest {path} line {line}: audio file {audio} does not exist")]
    MissingAudio {
        path: String,
        line: usize,
        audio: String,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub path: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Parses every non-blank line; the first bad line aborts with its 1-based number.
    pub fn read(path: &Path) -> Result<Self, ManifestError> {
        let name = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: name.clone(),
            source,
        })?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry =
                serde_json::from_str(line).map_err(|e| ManifestError::Parse {
                    path: name.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            if !(entry.duration.is_finite() && entry.duration > 0.0) {
                return Err(ManifestError::Parse {
                    path: name,
                    line: i + 1,
                    message: format!("duration must be positive, got {}", entry.duration),
                });
            }
            entries.push(entry);
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn write(path: &Path, entries: &[ManifestEntry]) -> std::io::Result<()> {
        let mut out = Vec::new();
        for e in entries {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        fs::File::create(path)?.write_all(&out)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.audio_filepath);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }

    /// Loads every entry's audio. Utterance ids are the manifest paths as written.
    pub fn load(&self) -> Result<Vec<Utterance>, ManifestError> {
        let mut out = Vec::with_capacity(self.entries.len());
        for (i, entry) in self.entries.iter().enumerate() {
            let audio = self.resolve(entry);
            if !audio.is_file() {
                return Err(ManifestError::MissingAudio {
                    path: self.path.display().to_string(),
                    line: i + 1,
                    audio: audio.display().to_string(),
                });
            }
            let wave = read_wav(&audio, Some(entry.speaker_id.clone()))?;
            out.push(Utterance::new(entry.audio_filepath.clone(), wave));
        }
        Ok(out)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries
            .iter()
            .map(|e| e.audio_filepath.as_str())
            .collect()
    }
}

/// Utterance-id batches for one epoch, in the order training consumes them.
pub fn make_batches(manifest: &Manifest, cfg: &TrainConfig, epoch: u64) -> Vec<Vec<String>> {
    let ids = manifest.ids();
    epoch_batches(ids.len(), cfg.batch_size, cfg.seed, epoch)
        .into_iter()
        .map(|b| b.into_iter().map(|i| ids[i].to_string()).collect())
        .collect()
}
