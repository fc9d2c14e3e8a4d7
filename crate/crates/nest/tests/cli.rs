//! The `nest` binary end to end on a small synthetic corpus.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    /// Writes `cfg.toml` (small corpus, short run) and synthesizes the corpus.
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = format!(
            "[paths]\nmanifest = \"data/manifest.jsonl\"\nnoise_dir = \"data/noise\"\nout_dir = \"runs/x\"\n\
             [quantizer]\nvocab = 32\n[encoder]\nvocab = 32\nd_model = 16\nd_ff = 32\n\
             [train]\nbatch_size = 4\ntotal_steps = 12\nwarmup_steps = 4\nseed = 3\n\
             [run]\ncheckpoint_every = 4\n[synth]\nutterances = 12\ntones_hz = [400.0, 900.0, 2000.0]\nduration_s = 0.6\n{extra}"
        );
        fs::write(dir.path().join("cfg.toml"), cfg).unwrap();
        let sb = Self { dir };
        let out = sb.run(&["synth-data", "--out", "data"]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        sb
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_nest"))
            .args(args)
            .args(["--config", "cfg.toml"])
            .current_dir(self.dir.path())
            .env("NEST_LOG", "error")
            .output()
            .unwrap()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn synth_data_writes_a_loadable_manifest() {
    let sb = Sandbox::new("");
    let m = nest::Manifest::read(&sb.path("data/manifest.jsonl")).unwrap();
    assert_eq!(m.entries.len(), 12);
    let speakers: std::collections::BTreeSet<_> =
        m.entries.iter().map(|e| e.speaker_id.as_str()).collect();
    assert_eq!(speakers.len(), 3);
    assert_eq!(m.load().unwrap().len(), 12);
    assert!(sb.path("data/noise/noise00.wav").is_file());
}

#[test]
fn pretrain_is_deterministic_and_resume_continues_the_log() {
    let sb = Sandbox::new("");
    assert_eq!(code(&sb.run(&["pretrain", "--out", "a"])), 0);
    assert_eq!(code(&sb.run(&["pretrain", "--out", "b"])), 0);
    let a = fs::read(sb.path("a/metrics.jsonl")).unwrap();
    assert_eq!(a, fs::read(sb.path("b/metrics.jsonl")).unwrap());
    assert_eq!(String::from_utf8_lossy(&a).lines().count(), 12);
    for step in [0, 4, 8, 12] {
        assert!(sb.path(&format!("a/step{step}.ckpt")).is_file());
    }

    // Resuming into the same directory rewrites an identical log and checkpoint.
    let before = fs::read(sb.path("b/step12.ckpt")).unwrap();
    let out = sb.run(&["resume", "--resume", "b/step4.ckpt", "--out", "b"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(sb.path("b/metrics.jsonl")).unwrap(), a);
    assert_eq!(fs::read(sb.path("b/step12.ckpt")).unwrap(), before);

    let other = sb.run(&["pretrain", "--out", "c", "--seed", "4"]);
    assert_eq!(code(&other), 0);
    assert_ne!(fs::read(sb.path("c/metrics.jsonl")).unwrap(), a);
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let sb = Sandbox::new("");
    assert_eq!(
        code(&sb.run(&["pretrain", "--out", "a", "--steps", "4"])),
        0
    );
    let bytes = fs::read(sb.path("a/step4.ckpt")).unwrap();
    let ckpt = nest::Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ckpt.to_bytes().unwrap(), bytes);
    assert_eq!(ckpt.step, 4);
}

#[test]
fn inspect_lists_tensors_and_flags_corruption() {
    let sb = Sandbox::new("");
    assert_eq!(
        code(&sb.run(&["pretrain", "--out", "a", "--steps", "4"])),
        0
    );
    let out = sb.run(&["inspect-ckpt", "a/step4.ckpt"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("step 4"));
    assert!(text.contains("crc ok"));
    assert!(text.contains("quant.codebook") && text.contains("[32, 16]"));
    assert!(text.contains("head.w") && text.contains("[32, 16]"));

    let mut bytes = fs::read(sb.path("a/step4.ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    fs::write(sb.path("a/bad.ckpt"), &bytes).unwrap();
    let out = sb.run(&["inspect-ckpt", "a/bad.ckpt"]);
    assert_eq!(code(&out), 2);
    assert!(stdout(&out).contains("MISMATCH"));
    let out = sb.run(&["resume", "--resume", "a/bad.ckpt", "--out", "a"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("checksum"), "{}", stderr(&out));
}

#[test]
fn invalid_configuration_exits_1_and_lists_every_problem() {
    let sb = Sandbox::new("");
    fs::write(
        sb.path("bad.toml"),
        "[encoder]\nconv_strides = [2, 2]\n[align]\nfactor = 8\n[mask]\np_m = 1.5\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_nest"))
        .args(["pretrain", "--config", "bad.toml"])
        .current_dir(sb.path("."))
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(
        err.contains("encoder.conv_strides") && err.contains("align.factor"),
        "{err}"
    );
    assert!(err.contains("mask.p_m"), "{err}");
    assert!(
        !sb.path("runs").exists(),
        "nothing is written before validation"
    );
}

#[test]
fn usage_errors_exit_1() {
    let sb = Sandbox::new("");
    assert_eq!(code(&sb.run(&["no-such-command"])), 1);
    assert_eq!(code(&sb.run(&["pretrain", "--seed", "abc"])), 1);
    assert_eq!(code(&sb.run(&["resume"])), 1);
}

#[test]
fn runtime_failures_exit_2() {
    let sb = Sandbox::new("");
    fs::write(
        sb.path("data/manifest.jsonl"),
        "{\"audio_filepath\": \"gone.wav\", \"duration\": 1.0, \"speaker_id\": \"a\"}\n",
    )
    .unwrap();
    let out = sb.run(&["pretrain"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("gone.wav"));
    fs::write(sb.path("data/manifest.jsonl"), "not json\n").unwrap();
    let out = sb.run(&["quantize", "--out", "q"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 1"));
}

#[test]
fn resume_rejects_a_checkpoint_from_another_config() {
    let sb = Sandbox::new("");
    assert_eq!(
        code(&sb.run(&["pretrain", "--out", "a", "--steps", "4"])),
        0
    );
    let out = sb.run(&[
        "resume",
        "--resume",
        "a/step4.ckpt",
        "--seed",
        "99",
        "--out",
        "a",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("different run configuration"));
}

#[test]
fn diagnostics_subcommands() {
    let sb = Sandbox::new("[diagnostics]\nmask_stats_frames = 1000\nmask_stats_trials = 20\n");
    let out = sb.run(&["mask-stats", "--out", "d"]);
    assert_eq!(code(&out), 0);
    let stats: serde_json::Value =
        serde_json::from_slice(&fs::read(sb.path("d/mask_stats.json")).unwrap()).unwrap();
    assert_eq!(stats["T"], 1000);
    assert_eq!(stats["trials"], 20);
    assert!(
        (stats["analytic_interior_rate"].as_f64().unwrap() - 0.331_028_241_430_319_7).abs() < 1e-12
    );

    let out = sb.run(&["grad-check"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert!(report["max_rel_err"].as_f64().unwrap() < 1e-4);

    assert_eq!(code(&sb.run(&["featurize", "--out", "f"])), 0);
    let first: serde_json::Value = serde_json::from_str(
        fs::read_to_string(sb.path("f/features.jsonl"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    assert_eq!(first["n_mels"], 80);
    assert_eq!(
        first["frames"].as_array().unwrap().len(),
        1 + (9600 - 400) / 160
    );

    assert_eq!(code(&sb.run(&["quantize", "--out", "q"])), 0);
    let text = fs::read_to_string(sb.path("q/tokens.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 12);
    let row: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(row["targets"].as_array().unwrap().len(), 58 / 8);
    assert_eq!(row["target_rate"], 12.5);

    let preview = Sandbox::new("[augment]\np_aug = 1.0\n");
    assert_eq!(code(&preview.run(&["augment-preview", "--out", "p"])), 0);
    let plan: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(preview.path("p/augment_preview/00.json")).unwrap(),
    )
    .unwrap();
    assert!(!plan["plan"]["segments"].as_array().unwrap().is_empty());
    let wav = nest::audio::read_wav(&preview.path("p/augment_preview/00.wav"), None).unwrap();
    assert_eq!(wav.len(), 9600);
}

#[test]
fn outputs_stay_under_out() {
    let sb = Sandbox::new("");
    let listing = |p: &Path| -> Vec<String> {
        let mut v: Vec<String> = fs::read_dir(p)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        v.sort();
        v
    };
    let before = listing(sb.dir.path());
    assert_eq!(
        code(&sb.run(&["pretrain", "--out", "only-here", "--steps", "2"])),
        0
    );
    let mut expected = before.clone();
    expected.push("only-here".into());
    expected.sort();
    assert_eq!(listing(sb.dir.path()), expected);
}
