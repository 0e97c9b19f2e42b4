//! Masked-autoencoder pretraining: embedding masking, a linear decoder, the
//! three-term reconstruction loss, and a deterministic AdamW training loop
//! with checkpoint/resume.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rayon::prelude::*;

use crate::dsp::{self, DspError, PreprocessConfig};
use crate::encoder::{EncoderConfig, EncoderError, EncoderWeights};
use crate::signal_io::Recording;
use crate::tensor::{
    cosine_lr, AdamW, AdamWState, Bound, Checkpoint, CheckpointError, Init, ParamSet, Tape, TensorError, Var,
};
use crate::tokenizer::{TokenStream, TokenizerError, TokenizerParams};

/// Sampling rate of tokens seen by the model.
pub const TOKEN_RATE_HZ: f64 = 128.0;
pub const BG_LOW_HZ: f64 = 13.0;
pub const BG_HIGH_HZ: f64 = 50.0;

const INIT_STREAM_SALT: u64 = 0x6d61_736b_6165;

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("mask plan covers {plan} tokens but the sequence has {actual}")]
    PlanMismatch { plan: usize, actual: usize },
    #[error("invalid pretraining config: {0}")]
    InvalidConfig(String),
    #[error("no valid window of {seq_len} tokens in the corpus")]
    NoValidWindow { seq_len: usize },
    #[error("non-finite loss at step {step}: total={total} masked={masked} unmasked={unmasked} bg={bg}")]
    NonFiniteLoss {
        step: usize,
        total: f64,
        masked: f64,
        unmasked: f64,
        bg: f64,
    },
    #[error("checkpoint does not match this run: {0}")]
    ResumeMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("i/o error writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, PretrainError>;

/// Indices of masked tokens in one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub seq_len: usize,
    /// Sorted, distinct, all `< seq_len`.
    pub masked: Vec<usize>,
    pub ratio: f64,
}

impl MaskPlan {
    /// Draws `floor(ratio * seq_len)` distinct positions uniformly.
    pub fn sample<R: Rng + ?Sized>(seq_len: usize, ratio: f64, rng: &mut R) -> Self {
        let count = ((ratio * seq_len as f64).floor() as usize).min(seq_len);
        let mut masked = index::sample(rng, seq_len, count).into_vec();
        masked.sort_unstable();
        Self { seq_len, masked, ratio }
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.seq_len];
        self.masked.iter().for_each(|&i| f[i] = true);
        f
    }

    pub fn unmasked(&self) -> Vec<usize> {
        let f = self.flags();
        (0..self.seq_len).filter(|&i| !f[i]).collect()
    }
}

/// Zeroes the masked rows of `e` (`[B * L, D]`, one plan per sequence).
pub fn apply_mask<'t>(e: Var<'t>, plans: &[MaskPlan]) -> Result<Var<'t>> {
    let rows = e.shape().first().copied().unwrap_or(0);
    let total: usize = plans.iter().map(|p| p.seq_len).sum();
    if total != rows {
        return Err(PretrainError::PlanMismatch {
            plan: total,
            actual: rows,
        });
    }
    let flags: Vec<bool> = plans.iter().flat_map(MaskPlan::flags).collect();
    Ok(e.zero_rows(&flags)?)
}

/// Adds `decoder.w_dec` (`r x token_len`) and `decoder.b_dec` to `ps`.
pub fn init_decoder_params(cfg: &EncoderConfig, ps: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<()> {
    ps.add(
        "decoder.w_dec",
        &[cfg.repr_dim, cfg.token_len],
        Init::Uniform { fan_in: cfg.repr_dim },
        rng,
    )?;
    ps.add("decoder.b_dec", &[cfg.token_len], Init::Zeros, rng)?;
    Ok(())
}

/// Per-token affine reconstruction `R W_dec + b_dec`.
pub fn decode<'t>(b: &Bound<'t>, r: Var<'t>) -> Result<Var<'t>> {
    Ok(r.matmul(b.var("decoder.w_dec")?)?.add(b.var("decoder.b_dec")?)?)
}

/// Weights and Huber threshold of the reconstruction objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_masked: f64,
    pub lambda_unmasked: f64,
    pub lambda_bg: f64,
    pub huber_delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_masked: 1.0,
            lambda_unmasked: 1.0,
            lambda_bg: 0.1,
            huber_delta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda_masked, self.lambda_unmasked, self.lambda_bg];
        if l.iter().any(|v| !v.is_finite() || *v < 0.0) || l.iter().all(|v| *v == 0.0) {
            return Err(PretrainError::InvalidConfig(
                "loss weights must be non-negative and not all zero".into(),
            ));
        }
        if !(self.huber_delta > 0.0 && self.huber_delta.is_finite()) {
            return Err(PretrainError::InvalidConfig("huber_delta must be positive".into()));
        }
        Ok(())
    }
}

/// Scalar values of the loss and its components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub masked: f64,
    pub unmasked: f64,
    pub bg: f64,
}

/// Three-term loss over a batch of `[B * L, token_len]` targets and
/// reconstructions. Huber terms are means over all elements of the selected
/// tokens; an empty selection contributes exactly zero. The band term is the
/// batch mean of `(1/L) sum_i ||BP(T_i - T^_i)||^2`.
pub fn pretrain_loss<'t>(
    tape: &'t Tape,
    tokens: Var<'t>,
    recon: Var<'t>,
    plans: &[MaskPlan],
    cfg: &LossConfig,
) -> Result<(Var<'t>, LossParts)> {
    let shape = tokens.shape();
    if shape != recon.shape() || shape.len() != 2 {
        return Err(PretrainError::ShapeMismatch(format!(
            "tokens {:?} vs reconstruction {:?}",
            shape,
            recon.shape()
        )));
    }
    let (rows, len) = (shape[0], shape[1]);
    let total_rows: usize = plans.iter().map(|p| p.seq_len).sum();
    if total_rows != rows {
        return Err(PretrainError::PlanMismatch {
            plan: total_rows,
            actual: rows,
        });
    }
    let mut masked = Vec::new();
    let mut kept = Vec::new();
    let mut offset = 0;
    for p in plans {
        masked.extend(p.masked.iter().map(|i| offset + i));
        kept.extend(p.unmasked().into_iter().map(|i| offset + i));
        offset += p.seq_len;
    }
    let huber_over = |idx: &[usize]| -> Result<Var<'t>> {
        if idx.is_empty() {
            return Ok(tape.constant(crate::tensor::Tensor::zeros(vec![])));
        }
        Ok(recon
            .gather_rows(idx)?
            .huber(tokens.gather_rows(idx)?, cfg.huber_delta)?)
    };
    let l_masked = huber_over(&masked)?;
    let l_unmasked = huber_over(&kept)?;
    let band = tape.constant(crate::tensor::Tensor::new(vec![len, len], band_matrix_for(len))?);
    let diff = tokens.sub(recon)?.matmul(band)?;
    let l_bg = diff.mul(diff)?.sum().scale(1.0 / rows.max(1) as f64);
    let total = l_masked
        .scale(cfg.lambda_masked)
        .add(l_unmasked.scale(cfg.lambda_unmasked))?
        .add(l_bg.scale(cfg.lambda_bg))?;
    let parts = LossParts {
        total: total.item(),
        masked: l_masked.item(),
        unmasked: l_unmasked.item(),
        bg: l_bg.item(),
    };
    Ok((total, parts))
}

/// Beta-gamma band projection for tokens of `len` samples at the model rate.
pub fn band_matrix_for(len: usize) -> Vec<f64> {
    if len == dsp::BP_TOKEN_LEN {
        dsp::bandpass_13_50_matrix().to_vec()
    } else {
        dsp::band_matrix(len, TOKEN_RATE_HZ, BG_LOW_HZ, BG_HIGH_HZ)
    }
}

/// Optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub loss: LossConfig,
    pub mask_ratio: f64,
    pub batch_size: usize,
    /// Passes over the corpus; used when `steps` is not set.
    pub epochs: usize,
    /// Total optimizer steps; overrides `epochs`.
    pub steps: Option<usize>,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            mask_ratio: 0.5,
            batch_size: 64,
            epochs: 16,
            steps: None,
            seq_len_min: 8,
            seq_len_max: 32,
            lr_max: 1e-4,
            lr_min: 1e-6,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let bad = |m: &str| Err(PretrainError::InvalidConfig(m.into()));
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.seq_len_min == 0 || self.seq_len_min > self.seq_len_max {
            return bad("need 1 <= seq_len_min <= seq_len_max");
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return bad("need 0 <= lr_min <= lr_max and lr_max > 0");
        }
        if self.steps == Some(0) || (self.steps.is_none() && self.epochs == 0) {
            return bad("training needs at least one step");
        }
        Ok(())
    }

    /// Step count: explicit `steps`, or enough batches of mean length to
    /// cover the corpus `epochs` times.
    pub fn total_steps(&self, corpus_tokens: usize) -> usize {
        self.steps.unwrap_or_else(|| {
            let mean_len = (self.seq_len_min + self.seq_len_max) as f64 / 2.0;
            let per_epoch = (corpus_tokens as f64 / (self.batch_size as f64 * mean_len)).ceil();
            (self.epochs as f64 * per_epoch).max(1.0) as usize
        })
    }

    fn meta_pairs(&self) -> Vec<(String, String)> {
        let f = |v: f64| format!("{:e}", v);
        vec![
            ("pretrain.lambda_masked".into(), f(self.loss.lambda_masked)),
            ("pretrain.lambda_unmasked".into(), f(self.loss.lambda_unmasked)),
            ("pretrain.lambda_bg".into(), f(self.loss.lambda_bg)),
            ("pretrain.huber_delta".into(), f(self.loss.huber_delta)),
            ("pretrain.mask_ratio".into(), f(self.mask_ratio)),
            ("pretrain.batch_size".into(), self.batch_size.to_string()),
            ("pretrain.seq_len_min".into(), self.seq_len_min.to_string()),
            ("pretrain.seq_len_max".into(), self.seq_len_max.to_string()),
            ("pretrain.lr_max".into(), f(self.lr_max)),
            ("pretrain.lr_min".into(), f(self.lr_min)),
            ("pretrain.seed".into(), self.seed.to_string()),
        ]
    }
}

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub parts: LossParts,
}

/// Encoder plus decoder under optimization.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub encoder: EncoderConfig,
    pub config: PretrainConfig,
    pub params: ParamSet,
    pub total_steps: usize,
    optimizer: AdamW,
    state: AdamWState,
    history: Vec<LossRecord>,
}

impl Trainer {
    pub fn new(encoder: EncoderConfig, config: PretrainConfig, total_steps: usize) -> Result<Self> {
        config.validate()?;
        encoder.validate()?;
        if total_steps == 0 {
            return Err(PretrainError::InvalidConfig("total_steps must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ INIT_STREAM_SALT);
        let mut params = ParamSet::new();
        encoder.init_params(&mut params, &mut rng)?;
        init_decoder_params(&encoder, &mut params, &mut rng)?;
        let state = AdamWState::new(&params);
        Ok(Self {
            encoder,
            config,
            params,
            total_steps,
            optimizer: AdamW::default(),
            state,
            history: Vec::new(),
        })
    }

    /// Next step index (number of completed steps).
    pub fn step_index(&self) -> usize {
        self.history.len()
    }

    pub fn history(&self) -> &[LossRecord] {
        &self.history
    }

    pub fn is_finished(&self) -> bool {
        self.step_index() >= self.total_steps
    }

    /// Learning rate for `step`; reaches `lr_min` on the last step.
    pub fn lr_at(&self, step: usize) -> f64 {
        cosine_lr(
            step,
            self.total_steps.saturating_sub(1),
            self.config.lr_max,
            self.config.lr_min,
        )
    }

    fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step as u64 + 1);
        rng
    }

    /// Largest usable sequence length for this corpus.
    fn seq_len_cap(&self, corpus: &TokenStream) -> Result<usize> {
        let cap = self
            .config
            .seq_len_max
            .min(self.encoder.max_seq_len)
            .min(corpus.longest_run());
        if cap < self.config.seq_len_min {
            return Err(PretrainError::NoValidWindow {
                seq_len: self.config.seq_len_min,
            });
        }
        Ok(cap)
    }

    /// Runs one optimization step and records its losses.
    pub fn step(&mut self, corpus: &TokenStream) -> Result<LossRecord> {
        if corpus.token_len() != self.encoder.token_len {
            return Err(PretrainError::ShapeMismatch(format!(
                "corpus tokens of {} samples, model expects {}",
                corpus.token_len(),
                self.encoder.token_len
            )));
        }
        let step = self.step_index();
        let cap = self.seq_len_cap(corpus)?;
        let mut rng = self.step_rng(step);
        let seq_len = rng.random_range(self.config.seq_len_min..=cap);
        let batch = self.config.batch_size;
        let starts = corpus.sample_starts(seq_len, batch, &mut rng)?;
        let plans: Vec<MaskPlan> = (0..batch)
            .map(|_| MaskPlan::sample(seq_len, self.config.mask_ratio, &mut rng))
            .collect();
        let flat: Vec<f64> = starts.iter().flat_map(|&s| corpus.window(s, seq_len)).collect();

        let lr = self.lr_at(step);
        let tape = Tape::new();
        let b = self.params.bind(&tape);
        let (loss, parts) = forward_loss(&self.encoder, &self.config.loss, &tape, &b, flat, &plans)?;
        if ![parts.total, parts.masked, parts.unmasked, parts.bg]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(PretrainError::NonFiniteLoss {
                step,
                total: parts.total,
                masked: parts.masked,
                unmasked: parts.unmasked,
                bg: parts.bg,
            });
        }
        let grads = b.gradients(&tape.backward(loss)?);
        drop(b);
        self.optimizer.step(&mut self.params, &grads, &mut self.state, lr)?;
        let rec = LossRecord { step, lr, parts };
        self.history.push(rec);
        Ok(rec)
    }

    /// Steps until finished, writing a checkpoint every `checkpoint_every`
    /// steps and at the end when `ckpt_dir` is given.
    pub fn run(&mut self, corpus: &TokenStream, ckpt_dir: Option<&Path>) -> Result<()> {
        while !self.is_finished() {
            self.step(corpus)?;
            let done = self.step_index();
            let periodic = self.config.checkpoint_every > 0 && done.is_multiple_of(self.config.checkpoint_every);
            if let Some(dir) = ckpt_dir {
                if periodic || self.is_finished() {
                    self.checkpoint().save(dir)?;
                }
            }
        }
        Ok(())
    }

    /// Frozen copy of the encoder part.
    pub fn encoder_weights(&self) -> Result<EncoderWeights> {
        Ok(EncoderWeights::from_checkpoint(&self.checkpoint())?)
    }

    /// Full training state: weights, optimizer moments, history and config.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.encoder.write_meta(&mut ck);
        for (k, v) in self.config.meta_pairs() {
            ck.set_meta(&k, v);
        }
        ck.set_meta("train.step", self.step_index());
        ck.set_meta("train.total_steps", self.total_steps);
        ck.set_meta("train.adam_step", self.state.step);
        for p in self.params.iter() {
            ck.push(&p.name, p.shape.clone(), p.values.clone());
        }
        for (i, p) in self.params.iter().enumerate() {
            ck.push(&format!("adam.m/{}", p.name), p.shape.clone(), self.state.m[i].clone());
            ck.push(&format!("adam.v/{}", p.name), p.shape.clone(), self.state.v[i].clone());
        }
        let hist: Vec<f64> = self
            .history
            .iter()
            .flat_map(|r| {
                [
                    r.step as f64,
                    r.lr,
                    r.parts.total,
                    r.parts.masked,
                    r.parts.unmasked,
                    r.parts.bg,
                ]
            })
            .collect();
        ck.push("train.history", vec![self.history.len(), 6], hist);
        ck
    }

    /// Restores a run; the checkpoint must come from the same configuration.
    pub fn resume(ckpt: &Checkpoint, config: PretrainConfig) -> Result<Self> {
        let encoder = EncoderConfig::from_meta(ckpt)?;
        for (k, v) in config.meta_pairs() {
            ckpt.expect_meta(&k, &v)
                .map_err(|e| PretrainError::ResumeMismatch(e.to_string()))?;
        }
        let parse = |k: &str| -> Result<usize> {
            ckpt.meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| PretrainError::ResumeMismatch(format!("missing {k}")))
        };
        let total_steps = parse("train.total_steps")?;
        let step = parse("train.step")?;
        let mut t = Self::new(encoder, config, total_steps)?;
        t.state.step = parse("train.adam_step")? as u64;
        let names: Vec<(String, Vec<usize>)> = t.params.iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
        for (i, (name, shape)) in names.iter().enumerate() {
            let p = t.params.get_mut(name).expect("name from same set");
            p.values = ckpt.values(name, shape)?.to_vec();
            t.state.m[i] = ckpt.values(&format!("adam.m/{name}"), shape)?.to_vec();
            t.state.v[i] = ckpt.values(&format!("adam.v/{name}"), shape)?.to_vec();
        }
        let hist = ckpt.values("train.history", &[step, 6])?;
        t.history = hist
            .chunks(6)
            .map(|r| LossRecord {
                step: r[0] as usize,
                lr: r[1],
                parts: LossParts {
                    total: r[2],
                    masked: r[3],
                    unmasked: r[4],
                    bg: r[5],
                },
            })
            .collect();
        Ok(t)
    }
}

/// Encode with masking between embedding and global stages, decode, and
/// score. `flat` holds `plans.len()` sequences of equal length.
pub fn forward_loss<'t>(
    enc: &EncoderConfig,
    loss: &LossConfig,
    tape: &'t Tape,
    b: &Bound<'t>,
    flat: Vec<f64>,
    plans: &[MaskPlan],
) -> Result<(Var<'t>, LossParts)> {
    let batch = plans.len();
    let seq_len = plans.first().map_or(0, |p| p.seq_len);
    if plans.iter().any(|p| p.seq_len != seq_len) {
        return Err(PretrainError::ShapeMismatch("plans differ in length".into()));
    }
    let rows = batch * seq_len;
    if flat.len() != rows * enc.token_len {
        return Err(PretrainError::PlanMismatch {
            plan: rows,
            actual: flat.len() / enc.token_len.max(1),
        });
    }
    let tokens = tape.leaf(vec![rows, enc.token_len], flat, false)?;
    let u = enc.temporal_encode(b, tokens)?;
    let e = enc.embed_tokens(b, u, batch, seq_len)?;
    let e = apply_mask(e, plans)?;
    let r = enc.global_encode(b, e, batch, seq_len)?;
    let recon = decode(b, r)?;
    pretrain_loss(tape, tokens, recon, plans, loss)
}

/// Mean Huber reconstruction error over every token of `seqs` (each a flat
/// `seq_len * token_len` window), masking with plans drawn from `seed`.
pub fn reconstruction_error(
    enc: &EncoderConfig,
    params: &ParamSet,
    seqs: &[Vec<f64>],
    seq_len: usize,
    mask_ratio: f64,
    huber_delta: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plans: Vec<MaskPlan> = seqs
        .iter()
        .map(|_| MaskPlan::sample(seq_len, mask_ratio, &mut rng))
        .collect();
    let tape = Tape::inference();
    let b = params.bind(&tape);
    let flat = seqs.concat();
    let rows = seqs.len() * seq_len;
    let tokens = tape.leaf(vec![rows, enc.token_len], flat.clone(), false)?;
    let u = enc.temporal_encode(&b, tokens)?;
    let e = apply_mask(enc.embed_tokens(&b, u, seqs.len(), seq_len)?, &plans)?;
    let recon = decode(&b, enc.global_encode(&b, e, seqs.len(), seq_len)?)?;
    Ok(recon.huber(tokens, huber_delta)?.item())
}

/// Preprocesses every channel of `recordings` and tokenizes each surviving
/// segment into one stream, with a boundary after every segment.
pub fn build_corpus(
    recordings: &[Recording],
    preprocess: &PreprocessConfig,
    tokenizer: &TokenizerParams,
) -> std::result::Result<TokenStream, DspError> {
    let per_channel: Vec<std::result::Result<Vec<Vec<f64>>, DspError>> = recordings
        .par_iter()
        .flat_map_iter(|rec| {
            rec.channels
                .iter()
                .map(move |ch| dsp::preprocess_channel(&ch.samples_f64(), rec.sampling_rate_hz, preprocess))
        })
        .collect();
    let mut stream = TokenStream::new(tokenizer.token_len);
    for segments in per_channel {
        for seg in segments? {
            stream.push_segment(&seg, tokenizer);
        }
    }
    Ok(stream)
}

/// Loss history as CSV: `step,lr,total,l_masked,l_unmasked,l_bg`.
pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("step,lr,total,l_masked,l_unmasked,l_bg\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{:e},{:e}",
            r.step, r.lr, r.parts.total, r.parts.masked, r.parts.unmasked, r.parts.bg
        );
    }
    s
}

pub fn write_loss_csv(history: &[LossRecord], path: &Path) -> Result<()> {
    std::fs::write(path, loss_csv(history)).map_err(|source| PretrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Mean of `n` values starting at `from`.
pub fn moving_average(history: &[LossRecord], from: usize, n: usize) -> Option<f64> {
    let w = history.get(from..from + n)?;
    Some(w.iter().map(|r| r.parts.total).sum::<f64>() / n as f64)
}
