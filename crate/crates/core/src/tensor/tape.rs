use std::cell::RefCell;

use super::{Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

const LN_EPS: f64 = 1e-5;
// sqrt(2/pi) and the cubic coefficient of the tanh GELU approximation.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// How operand indices map onto the output of a broadcasting op.
#[derive(Debug)]
enum Broadcast {
    Same,
    /// `b` equals the trailing dims of the output; `a` is the output shape.
    SuffixB,
    SuffixA,
    General {
        a_idx: Vec<usize>,
        b_idx: Vec<usize>,
    },
}

impl Broadcast {
    fn indices(&self, i: usize, a_len: usize, b_len: usize) -> (usize, usize) {
        match self {
            Broadcast::Same => (i, i),
            Broadcast::SuffixB => (i, i % b_len),
            Broadcast::SuffixA => (i % a_len, i),
            Broadcast::General { a_idx, b_idx } => (a_idx[i], b_idx[i]),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: Binary,
        a: usize,
        b: usize,
        map: Broadcast,
    },
    Scale {
        x: usize,
        c: f64,
    },
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        n: usize,
        k: usize,
        m: usize,
        shared_b: bool,
    },
    Conv1d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        batch: usize,
        cin: usize,
        cout: usize,
        t: usize,
        k: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        outer: usize,
        len: usize,
        inner: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Elu(usize),
    Gelu(usize),
    Softmax {
        x: usize,
        cols: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        batch: usize,
        n: usize,
        heads: usize,
        dh: usize,
        probs: Vec<f64>,
    },
    Huber {
        pred: usize,
        target: usize,
        delta: f64,
    },
    Sum(usize),
    Reshape(usize),
    GatherRows {
        x: usize,
        cols: usize,
        idx: Vec<usize>,
    },
    ConcatRows {
        a: usize,
        b: usize,
    },
    ZeroRows {
        x: usize,
        cols: usize,
        mask: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records values and op history for one forward/backward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Adjoints of the leaves reached by a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of the given length when it was not reached.
    pub fn get_or_zeros(&self, v: Var<'_>, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| {
        let off = rank - s.len();
        if i < off {
            1
        } else {
            s[i - off]
        }
    };
    (0..rank)
        .map(|i| match (dim(a, i), dim(b, i)) {
            (x, y) if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

fn general_broadcast(out: &[usize], operand: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let off = rank - operand.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..rank).rev() {
        if i >= off {
            let d = operand[i - off];
            strides[i] = if d == 1 { 0 } else { s };
            s *= d;
        }
    }
    let total = numel(out);
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    for _ in 0..total {
        idx.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            if counter[ax] < out[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    idx
}

fn is_suffix(full: &[usize], part: &[usize]) -> bool {
    part.len() <= full.len() && full[full.len() - part.len()..] == *part
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients; for frozen-weight inference.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable input.
    pub fn var(&self, t: Tensor) -> Var<'_> {
        self.push(t.shape, t.data, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t.shape, t.data, Op::Leaf, false)
    }

    pub fn leaf(&self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, requires_grad))
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse pass from a scalar. Gradients are kept for leaves only.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::NotScalar(nodes[loss.id].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

/// Adds into the gradient slot of `id` when that node needs one.
fn with_grad<F: FnOnce(&mut [f64])>(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, f: F) {
    if !nodes[id].requires_grad {
        return;
    }
    let len = nodes[id].value.len();
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Binary { kind, a, b, map } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (al, bl) = (av.len(), bv.len());
            with_grad(nodes, grads, *a, |ga| {
                for (i, gi) in g.iter().enumerate() {
                    let (ia, ib) = map.indices(i, al, bl);
                    ga[ia] += match kind {
                        Binary::Add | Binary::Sub => *gi,
                        Binary::Mul => gi * bv[ib],
                    };
                }
            });
            with_grad(nodes, grads, *b, |gb| {
                for (i, gi) in g.iter().enumerate() {
                    let (ia, ib) = map.indices(i, al, bl);
                    gb[ib] += match kind {
                        Binary::Add => *gi,
                        Binary::Sub => -gi,
                        Binary::Mul => gi * av[ia],
                    };
                }
            });
        }
        Op::Scale { x, c } => with_grad(nodes, grads, *x, |gx| {
            gx.iter_mut().zip(g).for_each(|(d, gi)| *d += c * gi);
        }),
        Op::MatMul {
            a,
            b,
            batch,
            n,
            k,
            m,
            shared_b,
        } => {
            let (n, k, m) = (*n, *k, *m);
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let b_off = |bt: usize| if *shared_b { 0 } else { bt * k * m };
            with_grad(nodes, grads, *a, |ga| {
                for bt in 0..*batch {
                    for i in 0..n {
                        let grow = &g[bt * n * m + i * m..][..m];
                        for p in 0..k {
                            let brow = &bv[b_off(bt) + p * m..][..m];
                            ga[bt * n * k + i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
            });
            with_grad(nodes, grads, *b, |gb| {
                for bt in 0..*batch {
                    for i in 0..n {
                        let grow = &g[bt * n * m + i * m..][..m];
                        for p in 0..k {
                            let aval = av[bt * n * k + i * k + p];
                            let dst = &mut gb[b_off(bt) + p * m..][..m];
                            dst.iter_mut().zip(grow).for_each(|(d, gi)| *d += aval * gi);
                        }
                    }
                }
            });
        }
        Op::Conv1d {
            x,
            w,
            bias,
            batch,
            cin,
            cout,
            t,
            k,
        } => {
            let (cin, cout, t, k) = (*cin, *cout, *t, *k);
            let pad = k / 2;
            let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
            with_grad(nodes, grads, *x, |gx| {
                for nb in 0..*batch {
                    for co in 0..cout {
                        let grow = &g[(nb * cout + co) * t..][..t];
                        for ci in 0..cin {
                            let gxrow = &mut gx[(nb * cin + ci) * t..][..t];
                            for kk in 0..k {
                                let wval = wv[(co * cin + ci) * k + kk];
                                let (lo, hi, src) = conv_span(kk, pad, t);
                                gxrow[src..src + hi - lo]
                                    .iter_mut()
                                    .zip(&grow[lo..hi])
                                    .for_each(|(d, gv)| *d += wval * gv);
                            }
                        }
                    }
                }
            });
            with_grad(nodes, grads, *w, |gw| {
                for nb in 0..*batch {
                    for co in 0..cout {
                        let grow = &g[(nb * cout + co) * t..][..t];
                        for ci in 0..cin {
                            let xrow = &xv[(nb * cin + ci) * t..][..t];
                            for kk in 0..k {
                                let (lo, hi, src) = conv_span(kk, pad, t);
                                let acc = grow[lo..hi]
                                    .iter()
                                    .zip(&xrow[src..src + hi - lo])
                                    .fold(0.0, |a, (gv, xv)| a + gv * xv);
                                gw[(co * cin + ci) * k + kk] += acc;
                            }
                        }
                    }
                }
            });
            if let Some(bias) = bias {
                with_grad(nodes, grads, *bias, |gb| {
                    for nb in 0..*batch {
                        for (co, d) in gb.iter_mut().enumerate() {
                            *d += g[(nb * cout + co) * t..][..t].iter().sum::<f64>();
                        }
                    }
                });
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            outer,
            len,
            inner,
            xhat,
            rstd,
        } => {
            let (len, inner) = (*len, *inner);
            let gv = &nodes[*gain].value;
            with_grad(nodes, grads, *x, |gx| {
                let mut m1 = vec![0.0; inner];
                let mut m2 = vec![0.0; inner];
                for o in 0..*outer {
                    let base = o * len * inner;
                    m1.fill(0.0);
                    m2.fill(0.0);
                    for j in 0..len {
                        for i in 0..inner {
                            let idx = base + j * inner + i;
                            let dxh = g[idx] * gv[j];
                            m1[i] += dxh;
                            m2[i] += dxh * xhat[idx];
                        }
                    }
                    for j in 0..len {
                        for i in 0..inner {
                            let idx = base + j * inner + i;
                            let dxh = g[idx] * gv[j];
                            gx[idx] +=
                                rstd[o * inner + i] * (dxh - m1[i] / len as f64 - xhat[idx] * m2[i] / len as f64);
                        }
                    }
                }
            });
            with_grad(nodes, grads, *gain, |gg| {
                for o in 0..*outer {
                    for j in 0..len {
                        for i in 0..inner {
                            let idx = o * len * inner + j * inner + i;
                            gg[j] += g[idx] * xhat[idx];
                        }
                    }
                }
            });
            with_grad(nodes, grads, *bias, |gb| {
                for o in 0..*outer {
                    for j in 0..len {
                        for i in 0..inner {
                            gb[j] += g[o * len * inner + j * inner + i];
                        }
                    }
                }
            });
        }
        Op::Elu(x) => {
            let xv = &nodes[*x].value;
            with_grad(nodes, grads, *x, |gx| {
                for i in 0..g.len() {
                    let d = if xv[i] >= 0.0 { 1.0 } else { out[i] + 1.0 };
                    gx[i] += g[i] * d;
                }
            });
        }
        Op::Gelu(x) => {
            let xv = &nodes[*x].value;
            with_grad(nodes, grads, *x, |gx| {
                for i in 0..g.len() {
                    gx[i] += g[i] * gelu_grad(xv[i]);
                }
            });
        }
        Op::Softmax { x, cols } => with_grad(nodes, grads, *x, |gx| {
            for (r, yrow) in out.chunks(*cols).enumerate() {
                let grow = &g[r * cols..][..*cols];
                let dot: f64 = yrow.iter().zip(grow).map(|(y, d)| y * d).sum();
                for c in 0..*cols {
                    gx[r * cols + c] += yrow[c] * (grow[c] - dot);
                }
            }
        }),
        Op::Attention {
            q,
            k,
            v,
            batch,
            n,
            heads,
            dh,
            probs,
        } => {
            let (n, heads, dh) = (*n, *heads, *dh);
            let dm = heads * dh;
            let scale = 1.0 / (dh as f64).sqrt();
            let (qv, kv, vv) = (&nodes[*q].value, &nodes[*k].value, &nodes[*v].value);
            let mut dq = vec![0.0; qv.len()];
            let mut dk = vec![0.0; kv.len()];
            let mut dv = vec![0.0; vv.len()];
            let mut dp = vec![0.0; n * n];
            for bt in 0..*batch {
                let base = bt * n * dm;
                for h in 0..heads {
                    let p = &probs[(bt * heads + h) * n * n..][..n * n];
                    let col = h * dh;
                    for i in 0..n {
                        let go = &g[base + i * dm + col..][..dh];
                        for j in 0..n {
                            let vrow = &vv[base + j * dm + col..][..dh];
                            dp[i * n + j] = go.iter().zip(vrow).map(|(a, b)| a * b).sum();
                            let pij = p[i * n + j];
                            let dvrow = &mut dv[base + j * dm + col..][..dh];
                            dvrow.iter_mut().zip(go).for_each(|(d, gv)| *d += pij * gv);
                        }
                    }
                    for i in 0..n {
                        let row = &p[i * n..][..n];
                        let dot: f64 = row.iter().zip(&dp[i * n..][..n]).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            let ds = row[j] * (dp[i * n + j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..dh {
                                dq[base + i * dm + col + c] += ds * kv[base + j * dm + col + c];
                                dk[base + j * dm + col + c] += ds * qv[base + i * dm + col + c];
                            }
                        }
                    }
                }
            }
            for (id, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                with_grad(nodes, grads, id, |gx| {
                    gx.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
                });
            }
        }
        Op::Huber { pred, target, delta } => {
            let (pv, tv) = (&nodes[*pred].value, &nodes[*target].value);
            let scale = g[0] / pv.len() as f64;
            let dpred: Vec<f64> = pv
                .iter()
                .zip(tv)
                .map(|(p, t)| scale * (p - t).clamp(-delta, *delta))
                .collect();
            with_grad(nodes, grads, *pred, |gp| {
                gp.iter_mut().zip(&dpred).for_each(|(a, b)| *a += b);
            });
            with_grad(nodes, grads, *target, |gt| {
                gt.iter_mut().zip(&dpred).for_each(|(a, b)| *a -= b);
            });
        }
        Op::Sum(x) => with_grad(nodes, grads, *x, |gx| {
            gx.iter_mut().for_each(|d| *d += g[0]);
        }),
        Op::Reshape(x) => with_grad(nodes, grads, *x, |gx| {
            gx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
        }),
        Op::GatherRows { x, cols, idx } => with_grad(nodes, grads, *x, |gx| {
            for (r, &src) in idx.iter().enumerate() {
                let dst = &mut gx[src * cols..][..*cols];
                dst.iter_mut().zip(&g[r * cols..][..*cols]).for_each(|(d, gi)| *d += gi);
            }
        }),
        Op::ConcatRows { a, b } => {
            let split = nodes[*a].value.len();
            with_grad(nodes, grads, *a, |ga| {
                ga.iter_mut().zip(&g[..split]).for_each(|(d, gi)| *d += gi);
            });
            with_grad(nodes, grads, *b, |gb| {
                gb.iter_mut().zip(&g[split..]).for_each(|(d, gi)| *d += gi);
            });
        }
        Op::ZeroRows { x, cols, mask } => with_grad(nodes, grads, *x, |gx| {
            for (r, &zeroed) in mask.iter().enumerate() {
                if !zeroed {
                    let dst = &mut gx[r * cols..][..*cols];
                    dst.iter_mut().zip(&g[r * cols..][..*cols]).for_each(|(d, gi)| *d += gi);
                }
            }
        }),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn to_tensor(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        Tensor {
            shape: nodes[self.id].shape.clone(),
            data: nodes[self.id].value.clone(),
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    fn binary(self, other: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        let (shape, value, map) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let shape = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| {
                TensorError::ShapeMismatch(format!("cannot broadcast {:?} with {:?}", a.shape, b.shape))
            })?;
            let map = if a.shape == b.shape {
                Broadcast::Same
            } else if a.shape == shape && is_suffix(&shape, &b.shape) {
                Broadcast::SuffixB
            } else if b.shape == shape && is_suffix(&shape, &a.shape) {
                Broadcast::SuffixA
            } else {
                Broadcast::General {
                    a_idx: general_broadcast(&shape, &a.shape),
                    b_idx: general_broadcast(&shape, &b.shape),
                }
            };
            let (al, bl) = (a.value.len(), b.value.len());
            let value = (0..numel(&shape))
                .map(|i| {
                    let (ia, ib) = map.indices(i, al, bl);
                    let (x, y) = (a.value[ia], b.value[ib]);
                    match kind {
                        Binary::Add => x + y,
                        Binary::Sub => x - y,
                        Binary::Mul => x * y,
                    }
                })
                .collect();
            (shape, value, map)
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(
            shape,
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                map,
            },
            rg,
        ))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let (shape, value) = self.map_values(|v| v * c);
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(shape, value, Op::Scale { x: self.id, c }, rg)
    }

    fn map_values(self, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        (n.shape.clone(), n.value.iter().map(|&v| f(v)).collect())
    }

    /// `[.., n, k] x [k, m]` (shared right operand) or `[.., n, k] x [.., k, m]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, value, op) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let mismatch = || TensorError::ShapeMismatch(format!("matmul {:?} x {:?}", a.shape, b.shape));
            if a.shape.len() < 2 || b.shape.len() < 2 {
                return Err(mismatch());
            }
            let (n, k) = (a.shape[a.shape.len() - 2], a.shape[a.shape.len() - 1]);
            let (kb, m) = (b.shape[b.shape.len() - 2], b.shape[b.shape.len() - 1]);
            if k != kb {
                return Err(mismatch());
            }
            let lead = &a.shape[..a.shape.len() - 2];
            let shared_b = b.shape.len() == 2;
            if !shared_b && b.shape[..b.shape.len() - 2] != *lead {
                return Err(mismatch());
            }
            let batch = numel(lead);
            let mut c = vec![0.0; batch * n * m];
            for bt in 0..batch {
                let b_off = if shared_b { 0 } else { bt * k * m };
                for i in 0..n {
                    let crow = &mut c[bt * n * m + i * m..][..m];
                    for p in 0..k {
                        let aval = a.value[bt * n * k + i * k + p];
                        let brow = &b.value[b_off + p * m..][..m];
                        crow.iter_mut().zip(brow).for_each(|(cv, bv)| *cv += aval * bv);
                    }
                }
            }
            let mut shape = lead.to_vec();
            shape.extend([n, m]);
            (
                shape,
                c,
                Op::MatMul {
                    a: self.id,
                    b: other.id,
                    batch,
                    n,
                    k,
                    m,
                    shared_b,
                },
            )
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(shape, value, op, rg))
    }

    /// Same-padded cross-correlation: `x [.., c_in, t]`, `w [c_out, c_in, k]`,
    /// optional `bias [c_out]` → `[.., c_out, t]`.
    pub fn conv1d(self, w: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let (shape, value, op) = {
            let nodes = self.tape.nodes.borrow();
            let (x, wn) = (&nodes[self.id], &nodes[w.id]);
            let mismatch = || TensorError::ShapeMismatch(format!("conv1d {:?} with {:?}", x.shape, wn.shape));
            if x.shape.len() < 2 || wn.shape.len() != 3 {
                return Err(mismatch());
            }
            let (cout, cin, k) = (wn.shape[0], wn.shape[1], wn.shape[2]);
            if k % 2 == 0 {
                return Err(TensorError::EvenKernel(k));
            }
            let r = x.shape.len();
            let t = x.shape[r - 1];
            if x.shape[r - 2] != cin {
                return Err(mismatch());
            }
            if let Some(b) = bias {
                if nodes[b.id].shape != [cout] {
                    return Err(mismatch());
                }
            }
            let batch = numel(&x.shape[..r - 2]);
            let pad = k / 2;
            let mut out = vec![0.0; batch * cout * t];
            for nb in 0..batch {
                for co in 0..cout {
                    let orow = &mut out[(nb * cout + co) * t..][..t];
                    if let Some(b) = bias {
                        orow.fill(nodes[b.id].value[co]);
                    }
                    for ci in 0..cin {
                        let xrow = &x.value[(nb * cin + ci) * t..][..t];
                        for kk in 0..k {
                            let wval = wn.value[(co * cin + ci) * k + kk];
                            let (lo, hi, src) = conv_span(kk, pad, t);
                            orow[lo..hi]
                                .iter_mut()
                                .zip(&xrow[src..src + hi - lo])
                                .for_each(|(o, xv)| *o += wval * xv);
                        }
                    }
                }
            }
            let mut shape = x.shape[..r - 2].to_vec();
            shape.extend([cout, t]);
            (
                shape,
                out,
                Op::Conv1d {
                    x: self.id,
                    w: w.id,
                    bias: bias.map(|b| b.id),
                    batch,
                    cin,
                    cout,
                    t,
                    k,
                },
            )
        };
        let mut ids = vec![self.id, w.id];
        ids.extend(bias.map(|b| b.id));
        let rg = self.tape.requires(&ids);
        Ok(self.tape.push(shape, value, op, rg))
    }

    /// Normalizes over `axis` (variance eps 1e-5), then applies per-position
    /// `gain` and `bias` of length `shape[axis]`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, axis: usize) -> Result<Var<'t>> {
        let (shape, value, op) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            if axis >= x.shape.len() {
                return Err(TensorError::ShapeMismatch(format!(
                    "axis {axis} out of range for {:?}",
                    x.shape
                )));
            }
            let len = x.shape[axis];
            if nodes[gain.id].shape != [len] || nodes[bias.id].shape != [len] {
                return Err(TensorError::ShapeMismatch(format!(
                    "layer norm affine params must have shape [{len}]"
                )));
            }
            let outer = numel(&x.shape[..axis]);
            let inner = numel(&x.shape[axis + 1..]);
            let (gv, bv) = (&nodes[gain.id].value, &nodes[bias.id].value);
            let mut xhat = vec![0.0; x.value.len()];
            let mut rstd = vec![0.0; outer * inner];
            let mut out = vec![0.0; x.value.len()];
            let mut mean = vec![0.0; inner];
            let mut var = vec![0.0; inner];
            for o in 0..outer {
                let base = o * len * inner;
                mean.fill(0.0);
                var.fill(0.0);
                for j in 0..len {
                    for i in 0..inner {
                        mean[i] += x.value[base + j * inner + i];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= len as f64);
                for j in 0..len {
                    for i in 0..inner {
                        let d = x.value[base + j * inner + i] - mean[i];
                        var[i] += d * d;
                    }
                }
                for i in 0..inner {
                    rstd[o * inner + i] = 1.0 / (var[i] / len as f64 + LN_EPS).sqrt();
                }
                for j in 0..len {
                    for i in 0..inner {
                        let idx = base + j * inner + i;
                        let xh = (x.value[idx] - mean[i]) * rstd[o * inner + i];
                        xhat[idx] = xh;
                        out[idx] = xh * gv[j] + bv[j];
                    }
                }
            }
            (
                x.shape.clone(),
                out,
                Op::LayerNorm {
                    x: self.id,
                    gain: gain.id,
                    bias: bias.id,
                    outer,
                    len,
                    inner,
                    xhat,
                    rstd,
                },
            )
        };
        let rg = self.tape.requires(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(shape, value, op, rg))
    }

    /// Layer norm over the last axis.
    pub fn layer_norm_last(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let axis = self.shape().len().saturating_sub(1);
        self.layer_norm(gain, bias, axis)
    }

    pub fn elu(self) -> Var<'t> {
        let (shape, value) = self.map_values(elu);
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(shape, value, Op::Elu(self.id), rg)
    }

    /// tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        let (shape, value) = self.map_values(gelu);
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(shape, value, Op::Gelu(self.id), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let (shape, value, cols) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let cols = *x.shape.last().unwrap_or(&1);
            let mut out = x.value.clone();
            for row in out.chunks_mut(cols.max(1)) {
                softmax_in_place(row);
            }
            (x.shape.clone(), out, cols)
        };
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(shape, value, Op::Softmax { x: self.id, cols }, rg)
    }

    /// Bidirectional scaled dot-product attention over pre-projected
    /// `q`, `k`, `v` of shape `[.., n, d_model]`, split into `heads` heads.
    pub fn attention(self, k: Var<'t>, v: Var<'t>, heads: usize) -> Result<Var<'t>> {
        let (shape, value, op) = {
            let nodes = self.tape.nodes.borrow();
            let (qn, kn, vn) = (&nodes[self.id], &nodes[k.id], &nodes[v.id]);
            if qn.shape != kn.shape || qn.shape != vn.shape || qn.shape.len() < 2 {
                return Err(TensorError::ShapeMismatch(format!(
                    "attention q {:?} k {:?} v {:?}",
                    qn.shape, kn.shape, vn.shape
                )));
            }
            let r = qn.shape.len();
            let (n, dm) = (qn.shape[r - 2], qn.shape[r - 1]);
            if heads == 0 || dm % heads != 0 {
                return Err(TensorError::HeadDivisibility { width: dm, heads });
            }
            let dh = dm / heads;
            let batch = numel(&qn.shape[..r - 2]);
            let scale = 1.0 / (dh as f64).sqrt();
            let mut probs = vec![0.0; batch * heads * n * n];
            let mut out = vec![0.0; qn.value.len()];
            for bt in 0..batch {
                let base = bt * n * dm;
                for h in 0..heads {
                    let col = h * dh;
                    let p = &mut probs[(bt * heads + h) * n * n..][..n * n];
                    for i in 0..n {
                        let qrow = &qn.value[base + i * dm + col..][..dh];
                        for j in 0..n {
                            let krow = &kn.value[base + j * dm + col..][..dh];
                            p[i * n + j] = scale * qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        softmax_in_place(&mut p[i * n..][..n]);
                        for j in 0..n {
                            let pij = p[i * n + j];
                            let vrow = &vn.value[base + j * dm + col..][..dh];
                            let orow = &mut out[base + i * dm + col..][..dh];
                            orow.iter_mut().zip(vrow).for_each(|(o, vv)| *o += pij * vv);
                        }
                    }
                }
            }
            (
                qn.shape.clone(),
                out,
                Op::Attention {
                    q: self.id,
                    k: k.id,
                    v: v.id,
                    batch,
                    n,
                    heads,
                    dh,
                    probs,
                },
            )
        };
        let rg = self.tape.requires(&[self.id, k.id, v.id]);
        Ok(self.tape.push(shape, value, op, rg))
    }

    /// Mean Huber loss: `½e²` for `|e| <= delta`, else `delta(|e| - ½delta)`.
    pub fn huber(self, target: Var<'t>, delta: f64) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (p, t) = (&nodes[self.id], &nodes[target.id]);
            if p.shape != t.shape {
                return Err(TensorError::ShapeMismatch(format!(
                    "huber {:?} vs {:?}",
                    p.shape, t.shape
                )));
            }
            if p.value.is_empty() {
                0.0
            } else {
                let total: f64 = p
                    .value
                    .iter()
                    .zip(&t.value)
                    .map(|(a, b)| {
                        let e = (a - b).abs();
                        if e <= delta {
                            0.5 * e * e
                        } else {
                            delta * (e - 0.5 * delta)
                        }
                    })
                    .sum();
                total / p.value.len() as f64
            }
        };
        let rg = self.tape.requires(&[self.id, target.id]);
        Ok(self.tape.push(
            vec![],
            vec![value],
            Op::Huber {
                pred: self.id,
                target: target.id,
                delta,
            },
            rg,
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let total = self.tape.nodes.borrow()[self.id].value.iter().sum();
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(vec![], vec![total], Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            if numel(shape) != x.value.len() {
                return Err(TensorError::ShapeMismatch(format!(
                    "reshape {:?} to {shape:?}",
                    x.shape
                )));
            }
            x.value.clone()
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(shape.to_vec(), value, Op::Reshape(self.id), rg))
    }

    /// Treats the tensor as rows of its last dimension and stacks the rows
    /// at `idx` (repeats allowed) into `[idx.len(), cols]`.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let (value, cols) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let cols = *x
                .shape
                .last()
                .ok_or_else(|| TensorError::ShapeMismatch("gather_rows on a scalar".into()))?;
            let rows = x.value.len().checked_div(cols).unwrap_or(0);
            if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
                return Err(TensorError::ShapeMismatch(format!(
                    "row {bad} out of range for {rows} rows"
                )));
            }
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &i in idx {
                out.extend_from_slice(&x.value[i * cols..(i + 1) * cols]);
            }
            (out, cols)
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(
            vec![idx.len(), cols],
            value,
            Op::GatherRows {
                x: self.id,
                cols,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks the rows of two `[*, cols]` tensors.
    pub fn concat_rows(self, other: Var<'t>) -> Result<Var<'t>> {
        let (value, shape) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (ca, cb) = (a.shape.last().copied(), b.shape.last().copied());
            if ca.is_none() || ca != cb || ca == Some(0) {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat_rows {:?} with {:?}",
                    a.shape, b.shape
                )));
            }
            let cols = ca.unwrap_or(1);
            let mut v = a.value.clone();
            v.extend_from_slice(&b.value);
            let rows = v.len() / cols;
            (v, vec![rows, cols])
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(
            shape,
            value,
            Op::ConcatRows {
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    /// Sets the rows flagged in `mask` (rows of the last dimension) to exactly
    /// zero; other rows pass through untouched.
    pub fn zero_rows(self, mask: &[bool]) -> Result<Var<'t>> {
        let (shape, value, cols) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let cols = *x.shape.last().unwrap_or(&1);
            let rows = x.value.len().checked_div(cols).unwrap_or(0);
            if mask.len() != rows {
                return Err(TensorError::ShapeMismatch(format!(
                    "mask of {} rows for {rows} rows",
                    mask.len()
                )));
            }
            let mut v = x.value.clone();
            for (r, &z) in mask.iter().enumerate() {
                if z {
                    v[r * cols..(r + 1) * cols].fill(0.0);
                }
            }
            (x.shape.clone(), v, cols)
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(
            shape,
            value,
            Op::ZeroRows {
                x: self.id,
                cols,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Output range `lo..hi` touched by kernel tap `kk` of a same-padded
/// convolution, and the input index `src` aligned with `lo`.
fn conv_span(kk: usize, pad: usize, t: usize) -> (usize, usize, usize) {
    if kk < pad {
        let lo = (pad - kk).min(t);
        (lo, t, 0)
    } else {
        let shift = kk - pad;
        (0, t.saturating_sub(shift), shift.min(t))
    }
}
