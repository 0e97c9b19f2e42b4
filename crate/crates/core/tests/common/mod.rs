#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use singlem::tensor::{Tape, Tensor, Var};

pub const FD_EPS: f64 = 1e-5;

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Five-point central difference `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.
/// Its O(h^4) truncation keeps curvature from masquerading as a gradient bug.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    let h = FD_EPS;
    (8.0 * (f(x + h) - f(x - h)) - (f(x + 2.0 * h) - f(x - 2.0 * h))) / (12.0 * h)
}

/// Relative error with a small absolute floor so exact zeros compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest element-wise relative error between the tape gradient of
/// `f(inputs)` and central finite differences, over every input element.
pub fn max_fd_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let loss = f(&tape, &vars);
        let g = tape.backward(loss).unwrap();
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| g.get_or_zeros(*v, t.len()))
            .collect()
    };
    let eval = |xs: &[Tensor]| {
        let tape = Tape::inference();
        let vars: Vec<Var> = xs.iter().map(|t| tape.var(t.clone())).collect();
        f(&tape, &vars).item()
    };
    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data[j];
            let numeric = central_difference(
                |v| {
                    xs[i].data[j] = v;
                    eval(&xs)
                },
                orig,
            );
            xs[i].data[j] = orig;
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

/// Random fixed weighting so every output element contributes to the scalar.
pub fn weighted_sum<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Var<'t> {
    let mut r = rng(seed ^ 0x5eed);
    let w = random_tensor(&y.shape(), &mut r);
    y.mul(tape.constant(w)).unwrap().sum()
}

/// Like [`max_fd_error`] but over every value of every trainable parameter.
pub fn max_param_fd_error<F>(ps: &singlem::tensor::ParamSet, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &singlem::tensor::Bound<'t>) -> Var<'t>,
{
    let analytic = {
        let tape = Tape::new();
        let b = ps.bind(&tape);
        let loss = f(&tape, &b);
        b.gradients(&tape.backward(loss).unwrap())
    };
    let eval = |p: &singlem::tensor::ParamSet| {
        let tape = Tape::inference();
        let b = p.bind(&tape);
        f(&tape, &b).item()
    };
    let mut work = ps.clone();
    let names: Vec<String> = ps.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    let index: Vec<usize> = ps
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .map(|(i, _)| i)
        .collect();
    let mut worst: f64 = 0.0;
    for (name, &pi) in names.iter().zip(&index) {
        let n = ps.get(name).unwrap().values.len();
        for j in 0..n {
            let orig = ps.get(name).unwrap().values[j];
            let numeric = central_difference(
                |v| {
                    work.get_mut(name).unwrap().values[j] = v;
                    eval(&work)
                },
                orig,
            );
            work.get_mut(name).unwrap().values[j] = orig;
            let e = rel_err(analytic[pi][j], numeric);
            assert!(e.is_finite(), "{name}[{j}]");
            worst = worst.max(e);
        }
    }
    worst
}

pub type OpFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>], u64) -> Var<'t> + Sync>;

/// One differentiable op (or small composition) under test.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: OpFn,
}

fn case(name: &'static str, shapes: &[&[usize]], f: OpFn) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        f,
    }
}

impl OpCase {
    /// Worst relative FD error for inputs drawn from `seed`.
    pub fn error(&self, seed: u64) -> f64 {
        let mut r = rng(seed);
        let inputs: Vec<Tensor> = self.shapes.iter().map(|s| random_tensor(s, &mut r)).collect();
        max_fd_error(&inputs, |tape, v| (self.f)(tape, v, seed))
    }
}

/// Every differentiable tape op, each reduced to a scalar.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case(
            "matmul",
            &[&[3, 4], &[4, 2]],
            Box::new(|_, v, _| v[0].matmul(v[1]).unwrap().sum()),
        ),
        case(
            "batched matmul",
            &[&[2, 3, 4], &[2, 4, 5]],
            Box::new(|t, v, s| weighted_sum(t, v[0].matmul(v[1]).unwrap(), s)),
        ),
        case(
            "add",
            &[&[3, 1], &[1, 4]],
            Box::new(|t, v, s| weighted_sum(t, v[0].add(v[1]).unwrap(), s)),
        ),
        case(
            "sub",
            &[&[2, 3, 4], &[4]],
            Box::new(|t, v, s| weighted_sum(t, v[0].sub(v[1]).unwrap(), s)),
        ),
        case(
            "mul",
            &[&[2, 1, 4], &[3, 1]],
            Box::new(|t, v, s| weighted_sum(t, v[0].mul(v[1]).unwrap(), s)),
        ),
        case(
            "scale",
            &[&[5]],
            Box::new(|t, v, s| weighted_sum(t, v[0].scale(-2.5), s)),
        ),
        case(
            "conv1d",
            &[&[2, 3, 9], &[4, 3, 5], &[4]],
            Box::new(|t, v, s| weighted_sum(t, v[0].conv1d(v[1], Some(v[2])).unwrap(), s)),
        ),
        case(
            "conv1d wide kernel",
            &[&[1, 2, 6], &[2, 2, 7]],
            Box::new(|t, v, s| weighted_sum(t, v[0].conv1d(v[1], None).unwrap(), s)),
        ),
        case(
            "layer_norm last axis",
            &[&[3, 6], &[6], &[6]],
            Box::new(|t, v, s| weighted_sum(t, v[0].layer_norm_last(v[1], v[2]).unwrap(), s)),
        ),
        case(
            "layer_norm middle axis",
            &[&[2, 4, 5], &[4], &[4]],
            Box::new(|t, v, s| weighted_sum(t, v[0].layer_norm(v[1], v[2], 1).unwrap(), s)),
        ),
        case(
            "elu",
            &[&[4, 5]],
            Box::new(|t, v, s| weighted_sum(t, v[0].scale(3.0).elu(), s)),
        ),
        case(
            "gelu",
            &[&[4, 5]],
            Box::new(|t, v, s| weighted_sum(t, v[0].scale(3.0).gelu(), s)),
        ),
        case(
            "softmax",
            &[&[3, 5]],
            Box::new(|t, v, s| weighted_sum(t, v[0].scale(2.0).softmax(), s)),
        ),
        case(
            "attention",
            &[&[3, 8], &[8, 8], &[8, 8], &[8, 8], &[8, 8]],
            Box::new(|t, v, s| {
                let x = v[0];
                let q = x.matmul(v[1]).unwrap();
                let k = x.matmul(v[2]).unwrap();
                let val = x.matmul(v[3]).unwrap();
                weighted_sum(t, q.attention(k, val, 2).unwrap().matmul(v[4]).unwrap(), s)
            }),
        ),
        case(
            "huber",
            &[&[4, 6], &[4, 6]],
            Box::new(|_, v, _| v[0].scale(2.0).huber(v[1], 1.0).unwrap()),
        ),
        case(
            "gather_rows",
            &[&[4, 3]],
            Box::new(|t, v, s| weighted_sum(t, v[0].gather_rows(&[3, 0, 0, 2]).unwrap(), s)),
        ),
        case(
            "concat_rows",
            &[&[2, 3], &[1, 3]],
            Box::new(|t, v, s| weighted_sum(t, v[0].concat_rows(v[1]).unwrap(), s)),
        ),
        case(
            "zero_rows",
            &[&[3, 2]],
            Box::new(|t, v, s| weighted_sum(t, v[0].zero_rows(&[true, false, true]).unwrap(), s)),
        ),
        case(
            "reshape and mean",
            &[&[2, 6]],
            Box::new(|t, v, s| {
                weighted_sum(t, v[0].reshape(&[3, 4]).unwrap().gelu(), s)
                    .add(v[0].mean())
                    .unwrap()
            }),
        ),
        case(
            "two-layer network",
            &[&[5, 4], &[4, 6], &[6], &[6], &[6], &[6, 3], &[5, 3]],
            Box::new(|_, v, _| {
                let h = v[0].matmul(v[1]).unwrap().add(v[2]).unwrap();
                let h = h.layer_norm_last(v[3], v[4]).unwrap().gelu();
                h.matmul(v[5]).unwrap().elu().huber(v[6], 0.5).unwrap()
            }),
        ),
    ]
}

/// FD error of the full tiny encoder + decoder + three-term loss, over
/// every parameter, for inputs and masks drawn from `seed`.
pub fn full_objective_error(seed: u64) -> f64 {
    use singlem::encoder::EncoderConfig;
    use singlem::pretrain::{forward_loss, init_decoder_params, LossConfig, MaskPlan};
    use singlem::tensor::ParamSet;

    let cfg = EncoderConfig::tiny();
    let mut ps = ParamSet::new();
    let mut r = rng(100 + seed);
    cfg.init_params(&mut ps, &mut r).unwrap();
    init_decoder_params(&cfg, &mut ps, &mut r).unwrap();
    let mut r = rng(seed);
    let plans: Vec<MaskPlan> = (0..2).map(|_| MaskPlan::sample(4, 0.5, &mut r)).collect();
    let mut r = rng(200 + seed);
    let flat: Vec<f64> = (0..8 * cfg.token_len).map(|_| r.random_range(-0.8..0.8)).collect();
    let loss = LossConfig::default();
    max_param_fd_error(&ps, |tape, b| {
        forward_loss(&cfg, &loss, tape, b, flat.clone(), &plans).unwrap().0
    })
}
