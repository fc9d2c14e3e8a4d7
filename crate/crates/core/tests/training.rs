//! End-to-end properties of the training step on a tiny synthetic corpus.

use nest_core::model::{
    batch_loss_and_grad, grad_check, grad_check_with, BlockKind, Encoder, EncoderConfig,
    EncoderParams,
};
use nest_core::quantizer::{Quantizer, QuantizerConfig};
use nest_core::signal::{synthesize, SynthSpec, Utterance};
use nest_core::train::{
    build_training_batch, run_step, train_step, Pipeline, PipelineConfig, TrainConfig,
};
use nest_core::{MaskConfig, Rng, TrainState};

fn corpus() -> (Vec<Utterance>, Vec<Utterance>) {
    let tones = [300.0, 700.0, 1500.0, 3000.0];
    let utts = (0..8)
        .map(|i| {
            let w = synthesize(&SynthSpec::tone(tones[i % 4], 0.5, 0.5))
                .unwrap()
                .with_speaker(format!("s{}", i % 4));
            Utterance::new(format!("u{i}"), w)
        })
        .collect();
    let noise = vec![Utterance::new(
        "n0",
        synthesize(&SynthSpec::white_noise(1.0, 0.2, 3)).unwrap(),
    )];
    (utts, noise)
}

fn small_encoder(kind: BlockKind) -> EncoderConfig {
    EncoderConfig {
        vocab: 32,
        d_model: 16,
        d_ff: 32,
        block_kind: kind,
        ..Default::default()
    }
}

fn setup(seed: u64) -> (TrainState, Pipeline, TrainConfig) {
    let q = Quantizer::new(QuantizerConfig {
        vocab: 32,
        ..Default::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        warmup_steps: 10,
        seed,
        ..Default::default()
    };
    let state = TrainState::new(&small_encoder(BlockKind::Ffn), q, &cfg);
    (
        state,
        Pipeline::new(PipelineConfig::default()).unwrap(),
        cfg,
    )
}

#[test]
fn same_seed_same_trajectory() {
    let (utts, noise) = corpus();
    let run = |seed| {
        let (mut st, pipe, cfg) = setup(seed);
        (0..6)
            .map(|_| run_step(&mut st, &utts, &noise, &pipe, &cfg).unwrap())
            .collect::<Vec<_>>()
    };
    let a = run(5);
    assert_eq!(a, run(5));
    assert_ne!(a, run(6));
}

#[test]
fn quantizer_is_untouched_by_training() {
    let (utts, noise) = corpus();
    let (mut st, pipe, cfg) = setup(1);
    let before = st.quantizer().clone();
    for _ in 0..4 {
        run_step(&mut st, &utts, &noise, &pipe, &cfg).unwrap();
    }
    assert_eq!(st.quantizer().projection(), before.projection());
    assert_eq!(st.quantizer().codebook(), before.codebook());
}

#[test]
fn batch_without_selected_windows_is_a_bitwise_no_op() {
    let (utts, noise) = corpus();
    let (mut st, _, cfg) = setup(2);
    let pipe = Pipeline::new(PipelineConfig {
        mask: MaskConfig {
            p_m: 0.0,
            ..Default::default()
        },
        ..Default::default()
    })
    .unwrap();
    let members: Vec<&Utterance> = utts.iter().take(4).collect();
    let batch = build_training_batch(
        &pipe,
        &members,
        &noise,
        st.quantizer(),
        &mut Rng::seed_from_u64(0),
    )
    .unwrap();
    assert_eq!(batch.selected_windows(), 0);
    let params = st.params.clone();
    let opt = st.optimizer.clone();
    let m = train_step(&mut st, &batch, &cfg).unwrap();
    assert!(m.skipped);
    assert_eq!(m.step, 1);
    let bits = |p: &EncoderParams| {
        p.values()
            .iter()
            .flat_map(|m| m.as_slice().iter().map(|x| x.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&st.params), bits(&params));
    assert_eq!(st.optimizer, opt);
}

#[test]
fn batch_examples_do_not_depend_on_their_neighbours() {
    // Each utterance draws from its own child stream, so utterance 0 of a batch
    // gets the same mask whatever else is in the batch.
    let (utts, noise) = corpus();
    let (st, pipe, _) = setup(3);
    let a: Vec<&Utterance> = vec![&utts[0], &utts[1], &utts[2]];
    let b: Vec<&Utterance> = vec![&utts[0], &utts[5], &utts[6]];
    let x = build_training_batch(
        &pipe,
        &a,
        &noise,
        st.quantizer(),
        &mut Rng::seed_from_u64(9),
    )
    .unwrap();
    let y = build_training_batch(
        &pipe,
        &b,
        &noise,
        st.quantizer(),
        &mut Rng::seed_from_u64(9),
    )
    .unwrap();
    assert_eq!(x.examples[0].mask, y.examples[0].mask);
    assert_eq!(x.examples[0].targets, y.examples[0].targets);
}

#[test]
fn targets_come_from_clean_audio_inputs_from_augmented() {
    let (utts, noise) = corpus();
    let (st, _, _) = setup(4);
    let mut cfg = PipelineConfig::default();
    cfg.augment.p_aug = 1.0;
    let pipe = Pipeline::new(cfg).unwrap();
    let members: Vec<&Utterance> = utts.iter().take(4).collect();
    let batch = build_training_batch(
        &pipe,
        &members,
        &noise,
        st.quantizer(),
        &mut Rng::seed_from_u64(1),
    )
    .unwrap();
    for (utt, ex) in members.iter().zip(&batch.examples) {
        assert!(!ex.plan.is_empty());
        assert_ne!(ex.augmented, utt.wave);
        let clean = pipe.featurizer().compute(&utt.wave, &utt.id).unwrap();
        let expected =
            nest_core::align::align_targets(st.quantizer(), &clean, &pipe.cfg.align).unwrap();
        assert_eq!(ex.targets, expected);
    }
}

#[test]
fn attention_encoder_passes_the_gradient_check() {
    let (utts, noise) = corpus();
    let q = Quantizer::new(QuantizerConfig {
        vocab: 32,
        ..Default::default()
    })
    .unwrap();
    let pipe = Pipeline::new(PipelineConfig {
        mask: MaskConfig {
            p_m: 0.05,
            ..Default::default()
        },
        ..Default::default()
    })
    .unwrap();
    let members: Vec<&Utterance> = utts.iter().take(2).collect();
    let batch =
        build_training_batch(&pipe, &members, &noise, &q, &mut Rng::seed_from_u64(4)).unwrap();
    let mut examples: Vec<_> = batch
        .examples
        .iter()
        .map(|e| e.to_model_example())
        .collect();
    for e in &mut examples {
        e.positions = (0..e.targets.len()).collect();
    }
    let cfg = small_encoder(BlockKind::AttentionFfn);
    let encoder = Encoder::new(&cfg);
    let params = EncoderParams::init(&cfg, 11);
    let report = grad_check(&encoder, &params, &examples, 1e-4, 60, 2).unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
    let broken = grad_check_with(&encoder, &params, &examples, 1e-4, 60, 2, |g| {
        for x in g[0].as_mut_slice() {
            *x = -*x + 1.0;
        }
    })
    .unwrap();
    assert!(broken.max_rel_err > 0.4, "{broken:?}");
}

#[test]
fn repeated_steps_on_one_batch_reduce_its_loss() {
    let (utts, noise) = corpus();
    let (mut st, pipe, mut cfg) = setup(8);
    cfg.warmup_steps = 1;
    cfg.peak_lr = 0.003;
    let pipe_cfg = PipelineConfig {
        mask: MaskConfig {
            p_m: 0.05,
            ..Default::default()
        },
        ..pipe.cfg.clone()
    };
    let pipe = Pipeline::new(pipe_cfg).unwrap();
    let members: Vec<&Utterance> = utts.iter().take(4).collect();
    let batch = build_training_batch(
        &pipe,
        &members,
        &noise,
        st.quantizer(),
        &mut Rng::seed_from_u64(2),
    )
    .unwrap();
    let examples: Vec<_> = batch
        .examples
        .iter()
        .map(|e| e.to_model_example())
        .collect();
    let first = batch_loss_and_grad(&st.encoder, &st.params, &examples, false)
        .unwrap()
        .loss;
    for _ in 0..30 {
        train_step(&mut st, &batch, &cfg).unwrap();
    }
    let last = batch_loss_and_grad(&st.encoder, &st.params, &examples, false)
        .unwrap()
        .loss;
    assert!(last < 0.5 * first, "{first} -> {last}");
}
