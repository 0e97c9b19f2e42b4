//! Single-channel encoder: temporal CNN, windowed feature embedding, and a
//! global transformer with a final linear projection.
//!
//! The forward functions work on flattened batches. `B` sequences of `L`
//! tokens are laid out as `[B * L, ...]` rows, sequence-major, and every
//! stage treats sequences independently, so the output for a sequence does
//! not depend on what it was batched with.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Bound, Checkpoint, CheckpointError, Init, ParamSet, Tape, TensorError, Var};

const EMBED_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

type Result<T> = std::result::Result<T, EncoderError>;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub token_len: usize,
    pub conv_kernels: [usize; 3],
    pub conv_channels: [usize; 3],
    /// Feature-embedding width `d`.
    pub embed_dim: usize,
    /// Local context window `w`.
    pub window: usize,
    pub embed_layers: usize,
    pub embed_heads: usize,
    pub bottleneck_dim: usize,
    /// Global transformer width `D`.
    pub model_dim: usize,
    pub global_layers: usize,
    pub global_heads: usize,
    /// Output representation size `r`.
    pub repr_dim: usize,
    pub max_seq_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            token_len: 128,
            conv_kernels: [3, 61, 1],
            conv_channels: [32, 32, 1],
            embed_dim: 128,
            window: 5,
            embed_layers: 4,
            embed_heads: 4,
            bottleneck_dim: 32,
            model_dim: 128,
            global_layers: 12,
            global_heads: 8,
            repr_dim: 16,
            max_seq_len: 64,
        }
    }
}

impl EncoderConfig {
    /// Full-size architecture.
    pub fn full() -> Self {
        Self::default()
    }

    /// Narrow model on full-length tokens, sized for single-core training.
    pub fn desk() -> Self {
        Self {
            conv_channels: [8, 8, 1],
            embed_dim: 32,
            embed_layers: 1,
            embed_heads: 2,
            bottleneck_dim: 16,
            model_dim: 32,
            global_layers: 2,
            global_heads: 2,
            ..Self::default()
        }
    }

    /// Smallest configuration, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            token_len: 16,
            conv_kernels: [3, 5, 1],
            conv_channels: [3, 3, 1],
            embed_dim: 8,
            window: 5,
            embed_layers: 1,
            embed_heads: 2,
            bottleneck_dim: 4,
            model_dim: 8,
            global_layers: 1,
            global_heads: 2,
            repr_dim: 4,
            max_seq_len: 8,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "desk" => Some(Self::desk()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EncoderError::InvalidConfig(m));
        let dims = [
            self.token_len,
            self.embed_dim,
            self.window,
            self.embed_heads,
            self.bottleneck_dim,
            self.model_dim,
            self.global_heads,
            self.repr_dim,
            self.max_seq_len,
        ];
        if dims.contains(&0) || self.conv_channels.contains(&0) {
            return bad("dimensions must be positive".into());
        }
        if let Some(k) = self.conv_kernels.iter().find(|k| **k % 2 == 0) {
            return bad(format!("conv kernel {k} must be odd"));
        }
        if self.conv_channels[2] != 1 {
            return bad("last conv layer must have one output channel".into());
        }
        if self.window.is_multiple_of(2) {
            return bad(format!("window {} must be odd", self.window));
        }
        if !self.embed_dim.is_multiple_of(self.embed_heads) {
            return bad(format!(
                "d={} not divisible by {} heads",
                self.embed_dim, self.embed_heads
            ));
        }
        if !self.model_dim.is_multiple_of(self.global_heads) {
            return bad(format!(
                "D={} not divisible by {} heads",
                self.model_dim, self.global_heads
            ));
        }
        if self.embed_dim < 2 || !self.embed_dim.is_multiple_of(2) {
            return bad(format!("d={} must be even", self.embed_dim));
        }
        if self.bottleneck_dim >= self.embed_dim {
            return bad(format!(
                "d_emb={} must be smaller than d={}",
                self.bottleneck_dim, self.embed_dim
            ));
        }
        Ok(())
    }

    fn meta_pairs(&self) -> Vec<(&'static str, String)> {
        let join = |a: &[usize; 3]| format!("{},{},{}", a[0], a[1], a[2]);
        vec![
            ("encoder.token_len", self.token_len.to_string()),
            ("encoder.conv_kernels", join(&self.conv_kernels)),
            ("encoder.conv_channels", join(&self.conv_channels)),
            ("encoder.embed_dim", self.embed_dim.to_string()),
            ("encoder.window", self.window.to_string()),
            ("encoder.embed_layers", self.embed_layers.to_string()),
            ("encoder.embed_heads", self.embed_heads.to_string()),
            ("encoder.bottleneck_dim", self.bottleneck_dim.to_string()),
            ("encoder.model_dim", self.model_dim.to_string()),
            ("encoder.global_layers", self.global_layers.to_string()),
            ("encoder.global_heads", self.global_heads.to_string()),
            ("encoder.repr_dim", self.repr_dim.to_string()),
            ("encoder.max_seq_len", self.max_seq_len.to_string()),
        ]
    }

    /// Echoes the config into checkpoint metadata.
    pub fn write_meta(&self, ckpt: &mut Checkpoint) {
        for (k, v) in self.meta_pairs() {
            ckpt.set_meta(k, v);
        }
    }

    /// Rebuilds a config from checkpoint metadata.
    pub fn from_meta(ckpt: &Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            ckpt.meta(k)
                .ok_or_else(|| EncoderError::Checkpoint(CheckpointError::Malformed(format!("missing meta.{k}"))))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| EncoderError::Checkpoint(CheckpointError::Malformed(format!("bad meta.{k}"))))
        };
        let triple = |k: &str| -> Result<[usize; 3]> {
            let v: Vec<usize> = get(k)?
                .split(',')
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| EncoderError::Checkpoint(CheckpointError::Malformed(format!("bad meta.{k}"))))?;
            v.try_into()
                .map_err(|_| EncoderError::Checkpoint(CheckpointError::Malformed(format!("bad meta.{k}"))))
        };
        let cfg = Self {
            token_len: num("encoder.token_len")?,
            conv_kernels: triple("encoder.conv_kernels")?,
            conv_channels: triple("encoder.conv_channels")?,
            embed_dim: num("encoder.embed_dim")?,
            window: num("encoder.window")?,
            embed_layers: num("encoder.embed_layers")?,
            embed_heads: num("encoder.embed_heads")?,
            bottleneck_dim: num("encoder.bottleneck_dim")?,
            model_dim: num("encoder.model_dim")?,
            global_layers: num("encoder.global_layers")?,
            global_heads: num("encoder.global_heads")?,
            repr_dim: num("encoder.repr_dim")?,
            max_seq_len: num("encoder.max_seq_len")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Adds all encoder parameters to `ps`, drawing from `rng`.
    pub fn init_params(&self, ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
        self.validate()?;
        let mut cin = 1;
        for (i, (&k, &cout)) in self.conv_kernels.iter().zip(&self.conv_channels).enumerate() {
            let p = format!("temporal.conv{}", i + 1);
            ps.add(
                &format!("{p}.weight"),
                &[cout, cin, k],
                Init::Uniform { fan_in: cin * k },
                rng,
            )?;
            ps.add(&format!("{p}.bias"), &[cout], Init::Zeros, rng)?;
            if i < 2 {
                let ln = format!("temporal.ln{}", i + 1);
                ps.add(&format!("{ln}.gain"), &[cout], Init::Ones, rng)?;
                ps.add(&format!("{ln}.bias"), &[cout], Init::Zeros, rng)?;
            }
            cin = cout;
        }
        let (l, d, dm) = (self.token_len, self.embed_dim, self.model_dim);
        ps.add("embed.w_e", &[l, d], Init::Uniform { fan_in: l }, rng)?;
        ps.add("embed.e0", &[d], Init::Normal { std: EMBED_STD }, rng)?;
        ps.add("embed.pos", &[self.window + 1, d], Init::Normal { std: EMBED_STD }, rng)?;
        for i in 0..self.embed_layers {
            init_block(ps, &format!("embed.layer{i}"), d, rng)?;
        }
        let widths = [d, d / 2, self.bottleneck_dim, dm];
        for i in 0..3 {
            let p = format!("embed.bottleneck.{}", i + 1);
            ps.add(
                &format!("{p}.weight"),
                &[widths[i], widths[i + 1]],
                Init::Uniform { fan_in: widths[i] },
                rng,
            )?;
            ps.add(&format!("{p}.bias"), &[widths[i + 1]], Init::Zeros, rng)?;
        }
        ps.add(
            "global.pos",
            &[self.max_seq_len, dm],
            Init::Normal { std: EMBED_STD },
            rng,
        )?;
        for i in 0..self.global_layers {
            init_block(ps, &format!("global.layer{i}"), dm, rng)?;
        }
        ps.add("global.ln_f.gain", &[dm], Init::Ones, rng)?;
        ps.add("global.ln_f.bias", &[dm], Init::Zeros, rng)?;
        ps.add("global.w_r", &[dm, self.repr_dim], Init::Uniform { fan_in: dm }, rng)?;
        Ok(())
    }

    /// Temporal CNN on `[N, token_len]` tokens, returning `[N, token_len]`.
    pub fn temporal_encode<'t>(&self, b: &Bound<'t>, tokens: Var<'t>) -> Result<Var<'t>> {
        let shape = tokens.shape();
        if shape.len() != 2 || shape[1] != self.token_len {
            return Err(EncoderError::ShapeMismatch(format!(
                "tokens {shape:?}, expected [N, {}]",
                self.token_len
            )));
        }
        let n = shape[0];
        let mut x = tokens.reshape(&[n, 1, self.token_len])?;
        for i in 1..=3 {
            let p = format!("temporal.conv{i}");
            x = x.conv1d(b.var(&format!("{p}.weight"))?, Some(b.var(&format!("{p}.bias"))?))?;
            if i < 3 {
                // Normalize across channels at each time step.
                let ln = format!("temporal.ln{i}");
                x = x.layer_norm(b.var(&format!("{ln}.gain"))?, b.var(&format!("{ln}.bias"))?, 1)?;
            }
            x = x.elu();
        }
        Ok(x.reshape(&[n, self.token_len])?)
    }

    /// Feature embedding of temporal features `[B * L, token_len]` into `[B * L, D]`.
    pub fn embed_tokens<'t>(&self, b: &Bound<'t>, u: Var<'t>, batch: usize, seq_len: usize) -> Result<Var<'t>> {
        if seq_len == 0 || batch == 0 {
            return Err(EncoderError::EmptySequence);
        }
        let rows = batch * seq_len;
        if u.shape() != [rows, self.token_len] {
            return Err(EncoderError::ShapeMismatch(format!(
                "features {:?}, expected [{rows}, {}]",
                u.shape(),
                self.token_len
            )));
        }
        let (d, w) = (self.embed_dim, self.window);
        let v = u.matmul(b.var("embed.w_e")?)?;
        // Row `rows` of the stacked table is e0.
        let table = v.concat_rows(b.var("embed.e0")?.reshape(&[1, d])?)?;
        let half = (w / 2) as isize;
        let mut idx = Vec::with_capacity(rows * (w + 1));
        for s in 0..batch {
            for i in 0..seq_len as isize {
                idx.push(rows);
                for j in -half..=half {
                    let src = (i + j).clamp(0, seq_len as isize - 1) as usize;
                    idx.push(s * seq_len + src);
                }
            }
        }
        let h = table
            .gather_rows(&idx)?
            .reshape(&[rows, w + 1, d])?
            .add(b.var("embed.pos")?)?;
        let mut h = h;
        for i in 0..self.embed_layers {
            h = transformer_block(b, &format!("embed.layer{i}"), h, self.embed_heads)?;
        }
        let first: Vec<usize> = (0..rows).map(|r| r * (w + 1)).collect();
        let mut z = h.reshape(&[rows * (w + 1), d])?.gather_rows(&first)?;
        for i in 1..=3 {
            let p = format!("embed.bottleneck.{i}");
            z = z
                .matmul(b.var(&format!("{p}.weight"))?)?
                .add(b.var(&format!("{p}.bias"))?)?;
            if i < 3 {
                z = z.gelu();
            }
        }
        Ok(z)
    }

    /// Global transformer over `[B * L, D]` embeddings, returning `[B * L, r]`.
    pub fn global_encode<'t>(&self, b: &Bound<'t>, e: Var<'t>, batch: usize, seq_len: usize) -> Result<Var<'t>> {
        if seq_len == 0 || batch == 0 {
            return Err(EncoderError::EmptySequence);
        }
        if seq_len > self.max_seq_len {
            return Err(EncoderError::SequenceTooLong {
                len: seq_len,
                max: self.max_seq_len,
            });
        }
        let dm = self.model_dim;
        if e.shape() != [batch * seq_len, dm] {
            return Err(EncoderError::ShapeMismatch(format!(
                "embeddings {:?}, expected [{}, {dm}]",
                e.shape(),
                batch * seq_len
            )));
        }
        let q: Vec<usize> = (0..seq_len).collect();
        let mut g = e
            .reshape(&[batch, seq_len, dm])?
            .add(b.var("global.pos")?.gather_rows(&q)?)?;
        for i in 0..self.global_layers {
            g = transformer_block(b, &format!("global.layer{i}"), g, self.global_heads)?;
        }
        let g = g.layer_norm_last(b.var("global.ln_f.gain")?, b.var("global.ln_f.bias")?)?;
        Ok(g.reshape(&[batch * seq_len, dm])?.matmul(b.var("global.w_r")?)?)
    }

    /// Full encoder on `[B * L, token_len]` tokens.
    pub fn encode<'t>(&self, b: &Bound<'t>, tokens: Var<'t>, batch: usize, seq_len: usize) -> Result<Var<'t>> {
        if seq_len > self.max_seq_len {
            return Err(EncoderError::SequenceTooLong {
                len: seq_len,
                max: self.max_seq_len,
            });
        }
        let u = self.temporal_encode(b, tokens)?;
        let e = self.embed_tokens(b, u, batch, seq_len)?;
        self.global_encode(b, e, batch, seq_len)
    }

    /// Parameter count implied by the config, computed from shapes alone.
    pub fn param_count(&self) -> usize {
        let block = |w: usize| 4 * (w * w + w) + 4 * w + (w * 4 * w + 4 * w) + (4 * w * w + w);
        let mut n = 0;
        let mut cin = 1;
        for (&k, &c) in self.conv_kernels.iter().zip(&self.conv_channels) {
            n += c * cin * k + c;
            cin = c;
        }
        n += 2 * self.conv_channels[0] + 2 * self.conv_channels[1];
        let (d, dm) = (self.embed_dim, self.model_dim);
        n += self.token_len * d + d + (self.window + 1) * d;
        n += self.embed_layers * block(d);
        n += d * (d / 2) + d / 2 + (d / 2) * self.bottleneck_dim + self.bottleneck_dim;
        n += self.bottleneck_dim * dm + dm;
        n += self.max_seq_len * dm + self.global_layers * block(dm) + 2 * dm;
        n + dm * self.repr_dim
    }
}

fn init_block(ps: &mut ParamSet, p: &str, w: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    for ln in ["ln1", "ln2"] {
        ps.add(&format!("{p}.{ln}.gain"), &[w], Init::Ones, rng)?;
        ps.add(&format!("{p}.{ln}.bias"), &[w], Init::Zeros, rng)?;
    }
    for proj in ["q", "k", "v", "o"] {
        ps.add(&format!("{p}.attn.w{proj}"), &[w, w], Init::Uniform { fan_in: w }, rng)?;
        ps.add(&format!("{p}.attn.b{proj}"), &[w], Init::Zeros, rng)?;
    }
    ps.add(&format!("{p}.ffn.w1"), &[w, 4 * w], Init::Uniform { fan_in: w }, rng)?;
    ps.add(&format!("{p}.ffn.b1"), &[4 * w], Init::Zeros, rng)?;
    ps.add(
        &format!("{p}.ffn.w2"),
        &[4 * w, w],
        Init::Uniform { fan_in: 4 * w },
        rng,
    )?;
    ps.add(&format!("{p}.ffn.b2"), &[w], Init::Zeros, rng)?;
    Ok(())
}

/// Multi-head self-attention with input and output projections over
/// `[.., n, width]`; no causal mask.
pub fn multi_head_attention<'t>(b: &Bound<'t>, prefix: &str, x: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let proj = |name: &str| -> Result<Var<'t>> {
        Ok(x.matmul(b.var(&format!("{prefix}.w{name}"))?)?
            .add(b.var(&format!("{prefix}.b{name}"))?)?)
    };
    let a = proj("q")?.attention(proj("k")?, proj("v")?, heads)?;
    Ok(a.matmul(b.var(&format!("{prefix}.wo"))?)?
        .add(b.var(&format!("{prefix}.bo"))?)?)
}

/// Pre-LN transformer layer: attention and a GELU FFN (width x4), each
/// inside a residual branch.
fn transformer_block<'t>(b: &Bound<'t>, p: &str, x: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let ln = |x: Var<'t>, name: &str| -> Result<Var<'t>> {
        Ok(x.layer_norm_last(b.var(&format!("{p}.{name}.gain"))?, b.var(&format!("{p}.{name}.bias"))?)?)
    };
    let a = multi_head_attention(b, &format!("{p}.attn"), ln(x, "ln1")?, heads)?.add(x)?;
    let f = ln(a, "ln2")?
        .matmul(b.var(&format!("{p}.ffn.w1"))?)?
        .add(b.var(&format!("{p}.ffn.b1"))?)?
        .gelu()
        .matmul(b.var(&format!("{p}.ffn.w2"))?)?
        .add(b.var(&format!("{p}.ffn.b2"))?)?;
    Ok(f.add(a)?)
}

/// Encoder architecture plus its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

impl EncoderWeights {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        config.init_params(&mut params, &mut rng)?;
        Ok(Self { config, params })
    }

    /// Copies the encoder tensors (and config) out of a checkpoint. Extra
    /// tensors such as the decoder or optimizer state are ignored.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = EncoderConfig::from_meta(ckpt)?;
        let mut weights = Self::init(config, 0)?;
        for p in weights.params.iter_mut() {
            p.values = ckpt.values(&p.name, &p.shape)?.to_vec();
        }
        weights.params.set_trainable(false);
        Ok(weights)
    }

    /// Frozen-weight inference for one token sequence (rows of `token_len`).
    pub fn encode_sequence(&self, tokens: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.encode_batch(&[tokens.to_vec()]).map(|mut v| v.remove(0))
    }

    /// Frozen-weight inference for equally long sequences; returns, per
    /// sequence, `L` rows of `repr_dim` values.
    pub fn encode_batch(&self, seqs: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<Vec<f64>>>> {
        let batch = seqs.len();
        let seq_len = seqs.first().map_or(0, Vec::len);
        if batch == 0 || seq_len == 0 {
            return Err(EncoderError::EmptySequence);
        }
        let l = self.config.token_len;
        let mut flat = Vec::with_capacity(batch * seq_len * l);
        for s in seqs {
            if s.len() != seq_len {
                return Err(EncoderError::ShapeMismatch("sequences differ in length".into()));
            }
            for t in s {
                if t.len() != l {
                    return Err(EncoderError::ShapeMismatch(format!(
                        "token of {} samples, expected {l}",
                        t.len()
                    )));
                }
                flat.extend_from_slice(t);
            }
        }
        let tape = Tape::inference();
        let b = self.params.bind(&tape);
        let x = tape.leaf(vec![batch * seq_len, l], flat, false)?;
        let r = self.config.encode(&b, x, batch, seq_len)?.value();
        let rd = self.config.repr_dim;
        Ok(r.chunks(seq_len * rd)
            .map(|s| s.chunks(rd).map(<[f64]>::to_vec).collect())
            .collect())
    }
}
