//! `nest <subcommand>`: exit 0 on success, 1 on invalid input or
//! configuration, 2 when a valid request fails at runtime.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use nest_core::align::align_targets;
use nest_core::masking::mask_stats;
use nest_core::model::{grad_check, Encoder, EncoderParams, Example};
use nest_core::train::{build_training_batch, epoch_batches};
use nest_core::Rng;
use serde_json::json;

use crate::audio::write_wav;
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigValidationError, RunConfig};
use crate::run::{pretrain, resume, synth_corpus, Workspace};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "nest",
    version,
    about = "Masked-token speech pretraining at desk scale"
)]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides train.seed; every random choice derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides train.total_steps.
    #[arg(long, global = true)]
    pub steps: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Checkpoint to continue from (resume) or to inspect (inspect-ckpt).
    #[arg(long, global = true)]
    pub resume: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the constant-tone toy corpus, noise pool and manifest.
    SynthData,
    /// Log-mel features of every manifest utterance as JSON lines.
    Featurize,
    /// Frame-rate tokens and aligned targets of every manifest utterance.
    Quantize,
    /// Empirical vs. analytic interior masking rate.
    MaskStats,
    /// Augment the first training batch and write the mixes with their plans.
    AugmentPreview,
    /// Compare backprop against central differences on the configured encoder.
    GradCheck,
    /// Train from scratch.
    Pretrain,
    /// Continue training from --resume.
    Resume,
    /// List a checkpoint's tensors, step and checksum status.
    InspectCkpt {
        /// Checkpoint file (alternatively --resume).
        path: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_OK
            };
        }
    };
    init_logging();
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigValidationError>().is_some() {
                EXIT_INVALID
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("NEST_LOG", "info");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

fn invalid(problem: String) -> anyhow::Error {
    ConfigValidationError {
        problems: vec![problem],
    }
    .into()
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = cli.steps {
        cfg.train.total_steps = steps;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    if let Command::InspectCkpt { path } = &cli.command {
        let path = path
            .as_ref()
            .or(cli.resume.as_ref())
            .ok_or_else(|| invalid("inspect-ckpt needs a checkpoint path".into()))?;
        return inspect(path);
    }
    let cfg = load_config(cli)?;
    let out = cfg.paths.out_dir.clone();
    match cli.command {
        Command::SynthData => {
            let dir = cli.out.clone().unwrap_or_else(|| {
                cfg.paths
                    .manifest
                    .parent()
                    .unwrap_or(Path::new("."))
                    .to_path_buf()
            });
            let manifest = synth_corpus(&cfg, cfg.train.seed, &dir)?;
            println!("{}", manifest.display());
        }
        Command::Featurize => featurize(&cfg, &out)?,
        Command::Quantize => quantize(&cfg, &out)?,
        Command::MaskStats => {
            let d = &cfg.diagnostics;
            let stats = mask_stats(
                &cfg.mask,
                d.mask_stats_frames,
                d.mask_stats_trials,
                cfg.train.seed,
            );
            let text = serde_json::to_string_pretty(&stats)?;
            if cli.out.is_some() {
                write_under(&out, "mask_stats.json", text.as_bytes())?;
            }
            println!("{text}");
        }
        Command::AugmentPreview => augment_preview(&cfg, &out)?,
        Command::GradCheck => run_grad_check(&cfg)?,
        Command::Pretrain => {
            let m = pretrain(&cfg, &out)?;
            report_run(&out, &m);
        }
        Command::Resume => {
            let ckpt = cli
                .resume
                .as_ref()
                .ok_or_else(|| invalid("resume needs --resume CKPT".into()))?;
            let m = resume(&cfg, ckpt, &out)?;
            report_run(&out, &m);
        }
        Command::InspectCkpt { .. } => unreachable!(),
    }
    Ok(())
}

fn report_run(out: &Path, m: &[nest_core::train::StepMetrics]) {
    match m.last() {
        Some(last) => println!(
            "{} steps, final loss {:.4}, masked_acc {:.3}; outputs in {}",
            m.len(),
            last.loss,
            last.masked_acc,
            out.display()
        ),
        None => println!("nothing to do; outputs in {}", out.display()),
    }
}

fn write_under(out: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn featurize(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ws = Workspace::open(cfg)?;
    let mut buf = Vec::new();
    for utt in &ws.corpus {
        let mel = ws.pipeline.featurizer().compute(&utt.wave, &utt.id)?;
        let rows: Vec<&[f32]> = mel.iter_frames().collect();
        serde_json::to_writer(
            &mut buf,
            &json!({"id": utt.id, "n_mels": mel.n_mels, "hop_ms": mel.hop_ms, "frames": rows}),
        )?;
        buf.push(b'\n');
    }
    let path = write_under(out, "features.jsonl", &buf)?;
    println!("{}", path.display());
    Ok(())
}

fn quantize(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ws = Workspace::open(cfg)?;
    let q = ws.quantizer()?;
    let mut buf = Vec::new();
    for utt in &ws.corpus {
        let mel = ws.pipeline.featurizer().compute(&utt.wave, &utt.id)?;
        let frames = q.quantize(&mel)?;
        let targets = align_targets(&q, &mel, &cfg.align)?;
        serde_json::to_writer(
            &mut buf,
            &json!({"id": utt.id, "rate": frames.rate, "tokens": frames.tokens, "target_rate": targets.rate, "targets": targets.tokens}),
        )?;
        buf.push(b'\n');
    }
    let path = write_under(out, "tokens.jsonl", &buf)?;
    println!("{}", path.display());
    Ok(())
}

fn augment_preview(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ws = Workspace::open(cfg)?;
    let batches = epoch_batches(ws.corpus.len(), cfg.train.batch_size, cfg.train.seed, 0);
    let Some(first) = batches.first() else {
        bail!(
            "corpus of {} utterances cannot fill a batch of {}",
            ws.corpus.len(),
            cfg.train.batch_size
        );
    };
    let members: Vec<_> = first.iter().map(|&i| &ws.corpus[i]).collect();
    let mut rng = Rng::keyed(cfg.train.seed, &[0x7072_6576]);
    let batch = build_training_batch(
        &ws.pipeline,
        &members,
        &ws.noise,
        &ws.quantizer()?,
        &mut rng,
    )?;
    let dir = out.join("augment_preview");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for (i, ex) in batch.examples.iter().enumerate() {
        write_wav(&dir.join(format!("{i:02}.wav")), &ex.augmented)?;
        let sidecar = json!({"id": ex.id, "speaker_id": ex.speaker_id, "plan": ex.plan});
        fs::write(
            dir.join(format!("{i:02}.json")),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        println!("{i:02}: {} segments={}", ex.id, ex.plan.segments.len());
    }
    Ok(())
}

fn run_grad_check(cfg: &RunConfig) -> Result<()> {
    let ws = Workspace::open(cfg)?;
    let q = ws.quantizer()?;
    let encoder = Encoder::new(&cfg.encoder);
    let params = EncoderParams::init(&cfg.encoder, cfg.train.seed);
    let utt = ws.corpus.first().context("manifest is empty")?;
    let mel = ws.pipeline.featurizer().compute(&utt.wave, &utt.id)?;
    let targets = align_targets(&q, &mel, &cfg.align)?.tokens;
    let positions = (0..targets.len()).collect();
    let example = Example {
        input: mel,
        targets,
        positions,
    };
    let d = &cfg.diagnostics;
    let report = grad_check(
        &encoder,
        &params,
        &[example],
        d.grad_check_eps,
        d.grad_check_coordinates,
        cfg.train.seed,
    )?;
    println!(
        "{}",
        json!({"max_rel_err": report.max_rel_err, "worst_param": report.worst_param, "worst_index": report.worst_index,
               "coordinates": report.coordinates, "tolerance": d.grad_check_tolerance})
    );
    if !(report.max_rel_err < d.grad_check_tolerance) {
        bail!(
            "gradient check failed: max relative error {:.3e} on {}",
            report.max_rel_err,
            report.worst_param
        );
    }
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = Checkpoint::from_bytes(&bytes);
    let crc = match &parsed {
        Err(CheckpointError::ChecksumMismatch { stored, computed }) => {
            format!("MISMATCH (stored {stored:08x}, computed {computed:08x})")
        }
        _ if bytes.len() >= 4 => format!(
            "ok ({:08x})",
            u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap())
        ),
        _ => "unreadable".into(),
    };
    let ckpt = match parsed {
        Ok(c) => c,
        Err(e) => {
            println!("file {}\ncrc {crc}", path.display());
            return Err(e.into());
        }
    };
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "file {}", path.display())?;
    writeln!(stdout, "step {}", ckpt.step)?;
    writeln!(stdout, "crc {crc}")?;
    writeln!(stdout, "tensors {}", ckpt.tensors.len())?;
    for t in &ckpt.tensors {
        let dims: Vec<String> = t.dims.iter().map(u32::to_string).collect();
        writeln!(stdout, "  {:<32} [{}]", t.name, dims.join(", "))?;
    }
    Ok(())
}
