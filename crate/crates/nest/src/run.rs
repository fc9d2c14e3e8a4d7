//! Corpus preparation and the pretraining driver.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{debug, info};
use nest_core::quantizer::Quantizer;
use nest_core::signal::{synthesize, SynthSpec, Utterance};
use nest_core::train::{run_step, Pipeline, StepMetrics, TrainState};

use crate::audio::{read_wav, write_wav};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::manifest::{Manifest, ManifestEntry};

pub const METRICS_FILE: &str = "metrics.jsonl";

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(format!("step{step}.ckpt"))
}

/// Writes the constant-tone corpus: one speaker per tone, utterances assigned
/// to tones round-robin, plus a white-noise pool under `noise/`.
pub fn synth_corpus(cfg: &RunConfig, seed: u64, out: &Path) -> Result<PathBuf> {
    let s = &cfg.synth;
    let audio_dir = out.join("audio");
    let noise_dir = out.join("noise");
    fs::create_dir_all(&audio_dir).with_context(|| format!("creating {}", audio_dir.display()))?;
    fs::create_dir_all(&noise_dir).with_context(|| format!("creating {}", noise_dir.display()))?;
    let mut entries = Vec::with_capacity(s.utterances);
    for i in 0..s.utterances {
        let tone = i % s.tones_hz.len();
        let wave = synthesize(&SynthSpec::tone(
            s.tones_hz[tone],
            s.duration_s,
            s.amplitude,
        ))?;
        let rel = format!("audio/utt{i:04}.wav");
        write_wav(&out.join(&rel), &wave)?;
        entries.push(ManifestEntry {
            audio_filepath: rel,
            duration: wave.duration_s(),
            speaker_id: format!("tone{tone}"),
        });
    }
    for i in 0..s.noise_clips {
        let clip_seed = nest_core::Rng::keyed(seed, &[i as u64]).next_u64();
        let wave = synthesize(&SynthSpec::white_noise(
            s.noise_duration_s,
            s.noise_amplitude,
            clip_seed,
        ))?;
        write_wav(&noise_dir.join(format!("noise{i:02}.wav")), &wave)?;
    }
    let manifest = out.join("manifest.jsonl");
    Manifest::write(&manifest, &entries)
        .with_context(|| format!("writing {}", manifest.display()))?;
    Ok(manifest)
}

/// Every `*.wav` in `dir`, sorted by file name; ids are `noise/<file name>`.
pub fn load_noise_pool(dir: Option<&Path>) -> Result<Vec<Utterance>> {
    let Some(dir) = dir else {
        return Ok(Vec::new());
    };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading noise directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    files
        .iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy();
            Ok(Utterance::new(format!("noise/{name}"), read_wav(p, None)?))
        })
        .collect()
}

/// Corpus, noise pool, featurization pipeline and quantizer for one config.
pub struct Workspace {
    pub cfg: RunConfig,
    pub corpus: Vec<Utterance>,
    pub noise: Vec<Utterance>,
    pub pipeline: Pipeline,
}

impl Workspace {
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        let manifest = Manifest::read(&cfg.paths.manifest)?;
        let corpus = manifest.load()?;
        let noise = load_noise_pool(cfg.paths.noise_dir.as_deref())?;
        let pipeline = Pipeline::new(cfg.pipeline())?;
        info!(
            "loaded {} utterances and {} noise clips",
            corpus.len(),
            noise.len()
        );
        Ok(Self {
            cfg: cfg.clone(),
            corpus,
            noise,
            pipeline,
        })
    }

    pub fn quantizer(&self) -> Result<Quantizer> {
        Ok(Quantizer::new(self.cfg.quantizer.clone())?)
    }
}

/// Fresh run: step-0 checkpoint, `total_steps` steps, final checkpoint.
pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<Vec<StepMetrics>> {
    let ws = Workspace::open(cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut state = TrainState::new(&cfg.encoder, ws.quantizer()?, &cfg.train);
    Checkpoint::from_state(&state, cfg.fingerprint()).save(&checkpoint_path(out, 0))?;
    let log = fs::File::create(out.join(METRICS_FILE))?;
    train_loop(&ws, &mut state, log, out)
}

/// Continues from `ckpt` to `total_steps`. An existing metrics log in `out` is
/// cut back to the checkpoint step first, so the log reads as one run.
pub fn resume(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<Vec<StepMetrics>> {
    let ws = Workspace::open(cfg)?;
    let checkpoint =
        Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let mut state = checkpoint.into_state(&cfg.encoder, &cfg.quantizer, cfg.fingerprint())?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let metrics = out.join(METRICS_FILE);
    let kept = if metrics.exists() {
        lines_up_to(&metrics, state.step)?
    } else {
        Vec::new()
    };
    let mut log = fs::File::create(&metrics)?;
    for line in kept {
        writeln!(log, "{line}")?;
    }
    info!("resuming at step {} from {}", state.step, ckpt.display());
    train_loop(&ws, &mut state, log, out)
}

fn lines_up_to(path: &Path, step: u64) -> Result<Vec<String>> {
    let mut kept = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        let m: serde_json::Value =
            serde_json::from_str(&line).with_context(|| format!("parsing {}", path.display()))?;
        if m["step"].as_u64().is_some_and(|s| s <= step) {
            kept.push(line);
        }
    }
    Ok(kept)
}

fn train_loop(
    ws: &Workspace,
    state: &mut TrainState,
    mut log: fs::File,
    out: &Path,
) -> Result<Vec<StepMetrics>> {
    let cfg = &ws.cfg;
    let total = cfg.train.total_steps;
    if state.step > total {
        bail!(
            "checkpoint is at step {} but train.total_steps is {total}",
            state.step
        );
    }
    let fingerprint = cfg.fingerprint();
    let mut history = Vec::new();
    while state.step < total {
        let m = run_step(state, &ws.corpus, &ws.noise, &ws.pipeline, &cfg.train)?;
        serde_json::to_writer(&mut log, &m)?;
        log.write_all(b"\n")?;
        debug!("{}", serde_json::to_string(&m)?);
        if cfg.run.log_every > 0 && m.step % cfg.run.log_every == 0 {
            info!(
                "step {} loss {:.4} masked_acc {:.3} lr {:.2e}",
                m.step, m.loss, m.masked_acc, m.lr
            );
        }
        let every = cfg.run.checkpoint_every;
        if m.step == total || (every > 0 && m.step % every == 0) {
            Checkpoint::from_state(state, fingerprint).save(&checkpoint_path(out, m.step))?;
        }
        history.push(m);
    }
    log.flush()?;
    Ok(history)
}
