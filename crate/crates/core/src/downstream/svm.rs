//! Soft-margin kernel SVM trained by SMO with second-order working-set
//! selection, and one-vs-one multiclass voting.

use super::DownstreamError;

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    /// `exp(-gamma * ||x - y||^2)`
    Rbf {
        gamma: f64,
    },
    Linear,
}

impl Kernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Rbf { gamma } => (-gamma * sq_dist(a, b)).exp(),
            Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        }
    }

    fn eval_parts(&self, dot: f64, sq: f64) -> f64 {
        match *self {
            Kernel::Rbf { gamma } => (-gamma * sq).exp(),
            Kernel::Linear => dot,
        }
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmParams {
    pub c: f64,
    pub kernel: Kernel,
    /// Stop once the maximal KKT violation drops below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl SvmParams {
    pub fn rbf(c: f64, gamma: f64) -> Self {
        Self {
            c,
            kernel: Kernel::Rbf { gamma },
            tol: 1e-3,
            max_iter: 1_000_000,
        }
    }

    pub fn linear(c: f64) -> Self {
        Self {
            kernel: Kernel::Linear,
            ..Self::rbf(c, 0.0)
        }
    }
}

/// Two-class machine: `f(x) = sum_i coef_i k(sv_i, x) - rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarySvm {
    pub support: Vec<Vec<f64>>,
    pub coef: Vec<f64>,
    pub rho: f64,
    pub kernel: Kernel,
}

impl BinarySvm {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.support
            .iter()
            .zip(&self.coef)
            .map(|(s, c)| c * self.kernel.eval(s, x))
            .sum::<f64>()
            - self.rho
    }
}

/// Pairwise Gram matrix from dot products and squared distances.
pub struct Gram {
    dots: Vec<f64>,
    sq: Vec<f64>,
    n: usize,
}

impl Gram {
    pub fn new(x: &[&[f64]]) -> Self {
        let n = x.len();
        let mut dots = vec![0.0; n * n];
        let mut sq = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let d: f64 = x[i].iter().zip(x[j]).map(|(a, b)| a * b).sum();
                let s = sq_dist(x[i], x[j]);
                dots[i * n + j] = d;
                dots[j * n + i] = d;
                sq[i * n + j] = s;
                sq[j * n + i] = s;
            }
        }
        Self { dots, sq, n }
    }

    /// Sub-matrix restricted to `idx`, evaluated under `kernel`.
    fn kernel_matrix(&self, idx: &[usize], kernel: Kernel) -> Vec<f64> {
        let m = idx.len();
        let mut k = vec![0.0; m * m];
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                k[a * m + b] = kernel.eval_parts(self.dots[i * self.n + j], self.sq[i * self.n + j]);
            }
        }
        k
    }
}

/// Trains one binary machine on rows `idx` of `x`, labels `y` in {+1, -1}.
pub fn train_binary(
    x: &[&[f64]],
    gram: &Gram,
    idx: &[usize],
    y: &[f64],
    params: &SvmParams,
) -> Result<BinarySvm, DownstreamError> {
    let n = idx.len();
    let k = gram.kernel_matrix(idx, params.kernel);
    let c = params.c;
    let mut alpha = vec![0.0; n];
    let mut g = vec![-1.0; n];
    let upper = |a: f64| a >= c;
    let lower = |a: f64| a <= 0.0;
    let mut iter = 0;
    loop {
        // Maximal violating i, then j by second-order gain.
        let mut gmax = f64::NEG_INFINITY;
        let mut gmax2 = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            if y[t] > 0.0 {
                if !upper(alpha[t]) && -g[t] >= gmax {
                    gmax = -g[t];
                    i_sel = Some(t);
                }
            } else if !lower(alpha[t]) && g[t] >= gmax {
                gmax = g[t];
                i_sel = Some(t);
            }
        }
        let mut j_sel = None;
        let mut best = f64::INFINITY;
        if let Some(i) = i_sel {
            for t in 0..n {
                let quad = k[i * n + i] + k[t * n + t] - 2.0 * k[i * n + t];
                let quad = if quad > 0.0 { quad } else { TAU };
                if y[t] > 0.0 {
                    if !lower(alpha[t]) {
                        let diff = gmax + g[t];
                        gmax2 = gmax2.max(g[t]);
                        if diff > 0.0 {
                            let obj = -(diff * diff) / quad;
                            if obj <= best {
                                best = obj;
                                j_sel = Some(t);
                            }
                        }
                    }
                } else if !upper(alpha[t]) {
                    let diff = gmax - g[t];
                    gmax2 = gmax2.max(-g[t]);
                    if diff > 0.0 {
                        let obj = -(diff * diff) / quad;
                        if obj <= best {
                            best = obj;
                            j_sel = Some(t);
                        }
                    }
                }
            }
        }
        let (Some(i), Some(j)) = (i_sel, j_sel) else { break };
        if gmax + gmax2 < params.tol {
            break;
        }
        iter += 1;
        if iter > params.max_iter {
            return Err(DownstreamError::NoConvergence(params.max_iter));
        }

        let qij = y[i] * y[j] * k[i * n + j];
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let mut quad = k[i * n + i] + k[j * n + j] + 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-g[i] - g[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let mut quad = k[i * n + i] + k[j * n + j] - 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (g[i] - g[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            g[t] += y[t] * (y[i] * k[t * n + i] * di + y[j] * k[t * n + j] * dj);
        }
    }

    // Offset from free vectors, else the midpoint of the feasible interval.
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free, mut sum_free) = (0usize, 0.0);
    for t in 0..n {
        let yg = y[t] * g[t];
        if upper(alpha[t]) {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if lower(alpha[t]) {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum_free += yg;
        }
    }
    let rho = if free > 0 {
        sum_free / free as f64
    } else {
        (ub + lb) / 2.0
    };

    let mut support = Vec::new();
    let mut coef = Vec::new();
    for t in 0..n {
        if alpha[t] > 0.0 {
            support.push(x[idx[t]].to_vec());
            coef.push(alpha[t] * y[t]);
        }
    }
    Ok(BinarySvm {
        support,
        coef,
        rho,
        kernel: params.kernel,
    })
}

/// One-vs-one ensemble over the sorted distinct training labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub classes: Vec<usize>,
    /// `(a, b, machine)` with positive decisions voting for `classes[a]`.
    pub machines: Vec<(usize, usize, BinarySvm)>,
}

impl SvmModel {
    pub fn fit(x: &[Vec<f64>], y: &[usize], params: &SvmParams) -> Result<Self, DownstreamError> {
        let rows: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
        let gram = Gram::new(&rows);
        Self::fit_with_gram(&rows, &gram, y, params)
    }

    /// Fits with a precomputed Gram matrix over `x`, so a hyperparameter
    /// sweep pays for the pairwise distances once.
    pub fn fit_with_gram(x: &[&[f64]], gram: &Gram, y: &[usize], params: &SvmParams) -> Result<Self, DownstreamError> {
        if x.len() != y.len() {
            return Err(DownstreamError::LengthMismatch {
                left: x.len(),
                right: y.len(),
            });
        }
        let mut classes: Vec<usize> = y.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(DownstreamError::SingleClass);
        }
        let mut machines = Vec::new();
        for a in 0..classes.len() {
            for b in a + 1..classes.len() {
                let idx: Vec<usize> = (0..y.len())
                    .filter(|&i| y[i] == classes[a] || y[i] == classes[b])
                    .collect();
                let yy: Vec<f64> = idx
                    .iter()
                    .map(|&i| if y[i] == classes[a] { 1.0 } else { -1.0 })
                    .collect();
                machines.push((a, b, train_binary(x, gram, &idx, &yy, params)?));
            }
        }
        Ok(Self { classes, machines })
    }

    /// Majority vote; ties go to the larger summed decision value in favour
    /// of the class, then to the smaller label.
    pub fn predict(&self, x: &[f64]) -> usize {
        let k = self.classes.len();
        let mut votes = vec![0usize; k];
        let mut score = vec![0.0; k];
        for (a, b, m) in &self.machines {
            let d = m.decision(x);
            if d > 0.0 {
                votes[*a] += 1;
            } else {
                votes[*b] += 1;
            }
            score[*a] += d;
            score[*b] -= d;
        }
        let mut best = 0;
        for c in 1..k {
            if votes[c] > votes[best] || (votes[c] == votes[best] && score[c] > score[best]) {
                best = c;
            }
        }
        self.classes[best]
    }

    pub fn predict_all(&self, x: &[Vec<f64>]) -> Vec<usize> {
        x.iter().map(|r| self.predict(r)).collect()
    }
}
