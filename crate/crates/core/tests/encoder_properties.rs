//! Structural and gradient properties of the encoder.

mod common;

use common::{max_fd_error, max_param_fd_error, random_tensor, rng, weighted_sum};
use rand::Rng;
use singlem::encoder::{multi_head_attention, EncoderConfig, EncoderWeights};
use singlem::tensor::{Init, ParamSet, Tape, Tensor};

fn tokens(n: usize, l: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| (0..l).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect()
}

fn embeddings(w: &EncoderWeights, toks: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cfg = &w.config;
    let tape = Tape::inference();
    let b = w.params.bind(&tape);
    let x = tape
        .leaf(vec![toks.len(), cfg.token_len], toks.concat(), false)
        .unwrap();
    let u = cfg.temporal_encode(&b, x).unwrap();
    let e = cfg.embed_tokens(&b, u, 1, toks.len()).unwrap().value();
    e.chunks(cfg.model_dim).map(<[f64]>::to_vec).collect()
}

#[test]
fn embedding_locality_radius_is_half_window() {
    let w = EncoderWeights::init(EncoderConfig::desk(), 21).unwrap();
    let half = w.config.window / 2;
    let base = tokens(12, 128, 1);
    let e0 = embeddings(&w, &base);
    for j in [0, 5, 11] {
        let mut pert = base.clone();
        pert[j].iter_mut().for_each(|v| *v += 0.3);
        let e1 = embeddings(&w, &pert);
        for i in 0..base.len() {
            let changed = e0[i] != e1[i];
            assert_eq!(changed, i.abs_diff(j) <= half, "token {j} vs embedding {i}");
        }
    }
}

#[test]
fn global_stage_mixes_every_position() {
    let w = EncoderWeights::init(EncoderConfig::desk(), 22).unwrap();
    let base = tokens(10, 128, 2);
    let r0 = w.encode_sequence(&base).unwrap();
    let mut pert = base.clone();
    pert[0].iter_mut().for_each(|v| *v *= -1.0);
    let r1 = w.encode_sequence(&pert).unwrap();
    for i in 0..base.len() {
        assert_ne!(r0[i], r1[i], "position {i} unaffected");
    }
}

#[test]
fn deterministic_and_batch_invariant() {
    let w = EncoderWeights::init(EncoderConfig::desk(), 23).unwrap();
    let seqs: Vec<Vec<Vec<f64>>> = (0..4).map(|s| tokens(6, 128, 10 + s)).collect();
    let alone: Vec<_> = seqs.iter().map(|s| w.encode_sequence(s).unwrap()).collect();
    assert_eq!(alone[0], w.encode_sequence(&seqs[0]).unwrap());
    let all = w.encode_batch(&seqs).unwrap();
    let pair = w.encode_batch(&seqs[2..]).unwrap();
    assert_eq!(all, alone);
    assert_eq!(pair[..], alone[2..]);
}

fn attention_params(width: usize, seed: u64) -> ParamSet {
    let mut r = rng(seed);
    let mut ps = ParamSet::new();
    for p in ["q", "k", "v", "o"] {
        ps.add(
            &format!("mha.w{p}"),
            &[width, width],
            Init::Uniform { fan_in: width },
            &mut r,
        )
        .unwrap();
        ps.add(&format!("mha.b{p}"), &[width], Init::Normal { std: 0.1 }, &mut r)
            .unwrap();
    }
    ps
}

#[test]
fn single_token_attention_is_value_projection() {
    let ps = attention_params(8, 1);
    let x = random_tensor(&[1, 8], &mut rng(2));
    let tape = Tape::inference();
    let b = ps.bind(&tape);
    let xv = tape.constant(x);
    let out = multi_head_attention(&b, "mha", xv, 2).unwrap().value();
    let v = xv
        .matmul(b.var("mha.wv").unwrap())
        .unwrap()
        .add(b.var("mha.bv").unwrap())
        .unwrap();
    let expect = v
        .matmul(b.var("mha.wo").unwrap())
        .unwrap()
        .add(b.var("mha.bo").unwrap())
        .unwrap();
    for (a, e) in out.iter().zip(expect.value()) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let ps = attention_params(8, 3);
    let x = random_tensor(&[5, 8], &mut rng(4));
    let perm = [3usize, 0, 4, 1, 2];
    let tape = Tape::inference();
    let b = ps.bind(&tape);
    let xv = tape.constant(x);
    let out = multi_head_attention(&b, "mha", xv, 2).unwrap().value();
    let px = xv.gather_rows(&perm).unwrap();
    let pout = multi_head_attention(&b, "mha", px, 2).unwrap().value();
    for (i, &src) in perm.iter().enumerate() {
        for c in 0..8 {
            assert!((pout[i * 8 + c] - out[src * 8 + c]).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_block_gradient() {
    for seed in 0..5 {
        let ps = attention_params(8, 100 + seed);
        let x = random_tensor(&[3, 8], &mut rng(seed));
        let err = max_param_fd_error(&ps, |tape, b| {
            let y = multi_head_attention(b, "mha", tape.constant(x.clone()), 2).unwrap();
            weighted_sum(tape, y, seed)
        });
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn temporal_stage_gradient_wrt_token() {
    let w = EncoderWeights::init(EncoderConfig::tiny(), 30).unwrap();
    let cfg = w.config.clone();
    let tok = random_tensor(&[1, cfg.token_len], &mut rng(31));
    let err = max_fd_error(&[tok], |tape, v| {
        let b = w.params.bind(tape);
        weighted_sum(tape, cfg.temporal_encode(&b, v[0]).unwrap(), 31)
    });
    assert!(err < 1e-4, "{err:e}");
}

#[test]
fn full_encoder_gradient_tiny_config() {
    for seed in 0..5u64 {
        let w = EncoderWeights::init(EncoderConfig::tiny(), 40 + seed).unwrap();
        let cfg = w.config.clone();
        let toks = Tensor::new(vec![3, cfg.token_len], tokens(3, cfg.token_len, seed).concat()).unwrap();
        let err = max_param_fd_error(&w.params, |tape, b| {
            let x = tape.constant(toks.clone());
            weighted_sum(tape, cfg.encode(b, x, 1, 3).unwrap(), seed)
        });
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}
