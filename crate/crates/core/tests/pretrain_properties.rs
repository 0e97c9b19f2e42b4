mod common;

use common::{full_objective_error, rng};
use rand::Rng;
use singlem::encoder::EncoderConfig;
use singlem::pretrain::{
    apply_mask, decode, init_decoder_params, pretrain_loss, reconstruction_error, LossConfig, MaskPlan, PretrainConfig,
    Trainer,
};
use singlem::tensor::{ParamSet, Tape, Tensor};
use singlem::tokenizer::TokenStream;

fn tiny_params(seed: u64) -> (EncoderConfig, ParamSet) {
    let cfg = EncoderConfig::tiny();
    let mut ps = ParamSet::new();
    let mut r = rng(seed);
    cfg.init_params(&mut ps, &mut r).unwrap();
    init_decoder_params(&cfg, &mut ps, &mut r).unwrap();
    (cfg, ps)
}

fn random_tokens(rows: usize, len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..rows * len).map(|_| r.random_range(-0.8..0.8)).collect()
}

/// Loss with the encoder input decoupled from the reconstruction targets.
fn split_loss(cfg: &EncoderConfig, ps: &ParamSet, input: &[f64], target: &[f64], plans: &[MaskPlan]) -> f64 {
    let loss = LossConfig {
        lambda_unmasked: 0.0,
        ..LossConfig::default()
    };
    let tape = Tape::inference();
    let b = ps.bind(&tape);
    let seq_len = plans[0].seq_len;
    let rows = plans.len() * seq_len;
    let x = tape.leaf(vec![rows, cfg.token_len], input.to_vec(), false).unwrap();
    let t = tape.leaf(vec![rows, cfg.token_len], target.to_vec(), false).unwrap();
    let u = cfg.temporal_encode(&b, x).unwrap();
    let e = apply_mask(cfg.embed_tokens(&b, u, plans.len(), seq_len).unwrap(), plans).unwrap();
    let recon = decode(&b, cfg.global_encode(&b, e, plans.len(), seq_len).unwrap()).unwrap();
    pretrain_loss(&tape, t, recon, plans, &loss).unwrap().0.item()
}

#[test]
fn masked_tokens_do_not_leak_through_the_encoder() {
    let (cfg, ps) = tiny_params(11);
    let seq_len = 8;
    // Tokens 0..3 masked; with window 5 (radius 2) token 0 is outside every
    // unmasked token's window, token 2 is inside token 3's and 4's.
    let plans = vec![MaskPlan {
        seq_len,
        masked: vec![0, 1, 2],
        ratio: 0.375,
    }];
    let x = random_tokens(seq_len, cfg.token_len, 5);
    let base = split_loss(&cfg, &ps, &x, &x, &plans);

    let mut far = x.clone();
    far[..cfg.token_len].iter_mut().for_each(|v| *v += 0.3);
    assert_eq!(split_loss(&cfg, &ps, &far, &x, &plans), base);
    // The same perturbation does move the loss through the targets.
    assert_ne!(split_loss(&cfg, &ps, &far, &far, &plans), base);

    let mut near = x.clone();
    near[2 * cfg.token_len..3 * cfg.token_len]
        .iter_mut()
        .for_each(|v| *v += 0.3);
    assert_ne!(split_loss(&cfg, &ps, &near, &x, &plans), base);
}

#[test]
fn five_hz_only_difference_is_invisible_to_band_term() {
    let len = 128;
    let rows = 4;
    let t = random_tokens(rows, len, 9);
    let r: Vec<f64> = t
        .iter()
        .enumerate()
        .map(|(i, v)| v + 0.2 * (2.0 * std::f64::consts::PI * 5.0 * (i % len) as f64 / 128.0).sin())
        .collect();
    let tape = Tape::inference();
    let plans = vec![MaskPlan {
        seq_len: rows,
        masked: vec![1, 3],
        ratio: 0.5,
    }];
    let (_, parts) = pretrain_loss(
        &tape,
        tape.constant(Tensor::new(vec![rows, len], t).unwrap()),
        tape.constant(Tensor::new(vec![rows, len], r).unwrap()),
        &plans,
        &LossConfig::default(),
    )
    .unwrap();
    assert!(parts.bg < 1e-12, "{}", parts.bg);
    assert!(parts.masked > 0.0 && parts.unmasked > 0.0);
}

#[test]
fn empty_selection_contributes_zero() {
    let tape = Tape::inference();
    let plans = vec![MaskPlan {
        seq_len: 2,
        masked: vec![],
        ratio: 0.0,
    }];
    let t = Tensor::new(vec![2, 16], random_tokens(2, 16, 1)).unwrap();
    let (_, parts) = pretrain_loss(
        &tape,
        tape.constant(t.clone()),
        tape.constant(Tensor::zeros(vec![2, 16])),
        &plans,
        &LossConfig::default(),
    )
    .unwrap();
    assert_eq!(parts.masked, 0.0);
    assert!(parts.unmasked > 0.0);
}

#[test]
fn full_objective_matches_finite_differences() {
    for seed in 0..5 {
        let err = full_objective_error(seed);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn short_training_beats_initialization_on_held_out_sequences() {
    let len = 16;
    let wave = |phase: f64, n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                (0..len)
                    .map(|t| 0.5 * (0.7 * (i * 12 + t) as f64 + phase).sin())
                    .collect()
            })
            .collect()
    };
    let train = TokenStream::from_parts(len, &wave(0.0, 64), vec![63]).unwrap();
    let held = TokenStream::from_parts(len, &wave(1.3, 16), vec![15]).unwrap();
    let cfg = PretrainConfig {
        batch_size: 4,
        steps: Some(60),
        seq_len_min: 4,
        seq_len_max: 8,
        lr_max: 3e-3,
        lr_min: 3e-5,
        seed: 4,
        ..PretrainConfig::default()
    };
    let mut tr = Trainer::new(EncoderConfig::tiny(), cfg, 60).unwrap();
    let init = tr.params.clone();
    tr.run(&train, None).unwrap();
    let seqs = held.sample_sequences(8, 4, 1).unwrap();
    let before = reconstruction_error(&EncoderConfig::tiny(), &init, &seqs, 8, 0.5, 1.0, 2).unwrap();
    let after = reconstruction_error(&EncoderConfig::tiny(), &tr.params, &seqs, 8, 0.5, 1.0, 2).unwrap();
    assert!(after < before, "{after} >= {before}");
}
