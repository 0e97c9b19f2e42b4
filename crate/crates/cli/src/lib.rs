//! Command implementations behind the `singlem` binary. Each command reads
//! a [`RunConfig`], writes its outputs into one directory, and records a
//! `manifest.json` describing the run.

pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use singlem::downstream::{
    extract_all, fourier_all, loso_evaluate, per_channel_csv, per_channel_evaluate, trial_from_recording,
    DownstreamError, EvalReport, Trial, TrialFeatures,
};
use singlem::dsp::{preprocess_channel, DspError};
use singlem::encoder::{EncoderError, EncoderWeights};
use singlem::pretrain::{build_corpus, loss_csv, PretrainError, Trainer};
use singlem::signal_io::{
    generate_recording, read_container, write_container, ChannelSignal, Recording, SignalIoError,
};
use singlem::tensor::{Checkpoint, CheckpointError};
use singlem::tokenizer::{TokenStream, TokenizerParams};
use thiserror::Error;

pub use config::RunConfig;

pub const MANIFEST: &str = "manifest.json";
pub const LABELS: &str = "labels.csv";
pub const FEATURES: &str = "features.csv";
pub const CHECKPOINT: &str = "checkpoint";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Signal {
        context: String,
        #[source]
        source: SignalIoError,
    },
    #[error("{context}: {source}")]
    Dsp {
        context: String,
        #[source]
        source: DspError,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Downstream(#[from] DownstreamError),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("malformed {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Stable identifier printed as `error[SGL-Exxx]`.
    pub fn code(&self) -> &'static str {
        let integrity = matches!(
            self,
            CliError::Checkpoint(CheckpointError::Integrity { .. })
                | CliError::Pretrain(PretrainError::Checkpoint(CheckpointError::Integrity { .. }))
                | CliError::Encoder(EncoderError::Checkpoint(CheckpointError::Integrity { .. }))
        );
        if integrity {
            return "SGL-E007";
        }
        match self {
            CliError::Usage(_) => "SGL-E001",
            CliError::Config(_) => "SGL-E002",
            CliError::Io { .. } => "SGL-E003",
            CliError::Signal { .. } | CliError::Malformed { .. } => "SGL-E004",
            CliError::Dsp { .. } => "SGL-E005",
            CliError::Checkpoint(_) => "SGL-E006",
            CliError::Pretrain(_) => "SGL-E008",
            CliError::Encoder(_) => "SGL-E009",
            CliError::Downstream(DownstreamError::EmptyInput(_)) | CliError::EmptyInput(_) => "SGL-E011",
            CliError::Downstream(_) => "SGL-E010",
        }
    }

    /// Process exit status: 2 for usage and config problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Flag overrides layered on top of the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub notch_hz: Option<f64>,
    pub max_seq_len: Option<usize>,
    pub fourier_k: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if let Some(n) = self.notch_hz {
            cfg.preprocess.notch_hz = Some(n);
        }
        if let Some(n) = self.max_seq_len {
            cfg.encoder.max_seq_len = Some(n);
        }
        if let Some(k) = self.fourier_k {
            cfg.extract.fourier_k = Some(k);
        }
    }
}

/// Parses the `--fourier` argument, `k=N`.
pub fn parse_fourier(arg: &str) -> Result<usize> {
    arg.strip_prefix("k=")
        .and_then(|n| n.parse().ok())
        .filter(|&k| k > 0)
        .ok_or_else(|| CliError::Usage(format!("--fourier expects k=N with N > 0, got {arg:?}")))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_time_s: f64,
}

fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: &[&Path],
    outputs: &[PathBuf],
    started: Instant,
) -> Result<()> {
    let m = RunManifest {
        command: command.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        config: cfg.clone(),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Config(e.to_string()))?;
    write(&out.join(MANIFEST), text.as_bytes())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Container header paths under `input` (a directory or one file), sorted.
pub fn list_containers(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(input).map_err(|e| CliError::io(input, e))? {
        let path = entry.map_err(|e| CliError::io(input, e))?.path();
        if path.extension().is_some_and(|e| e == "sgh") {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(CliError::EmptyInput(format!("no containers in {}", input.display())));
    }
    Ok(out)
}

fn load(path: &Path) -> Result<Recording> {
    read_container(path).map_err(|source| CliError::Signal {
        context: path.display().to_string(),
        source,
    })
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Writes synthetic raw recordings plus `labels.csv` (`file,subject,label`).
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let started = Instant::now();
    let synth = cfg
        .synth
        .as_ref()
        .ok_or_else(|| CliError::Config("missing section [synth]".into()))?;
    ensure_dir(out)?;
    let mut labels = String::from("file,subject,label\n");
    let mut outputs = Vec::new();
    for s in 0..synth.spec.n_subjects {
        for c in 0..synth.n_classes {
            for t in 0..synth.trials_per_class {
                let rec = generate_recording(&synth.spec, s, c, t).map_err(|source| CliError::Signal {
                    context: format!("synthesizing subject {s} class {c} trial {t}"),
                    source,
                })?;
                let name = format!("{}_c{c}_t{t}", rec.subject_id);
                let path = out.join(format!("{name}.sgh"));
                write_container(&rec, &path).map_err(|source| CliError::Signal {
                    context: path.display().to_string(),
                    source,
                })?;
                let _ = writeln!(labels, "{name}.sgh,{},{c}", rec.subject_id);
                outputs.push(path);
            }
        }
    }
    let lpath = out.join(LABELS);
    write(&lpath, labels.as_bytes())?;
    outputs.push(lpath);
    write_manifest(out, "synth", cfg, &[], &outputs, started)?;
    Ok(outputs)
}

/// Runs the preprocessing pipeline on every channel; each surviving segment
/// becomes its own single-channel scaled container.
pub fn cmd_preprocess(cfg: &RunConfig, input: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let started = Instant::now();
    let files = list_containers(input)?;
    ensure_dir(out)?;
    let mut outputs = Vec::new();
    for file in &files {
        let rec = load(file)?;
        for ch in &rec.channels {
            let segs =
                preprocess_channel(&ch.samples_f64(), rec.sampling_rate_hz, &cfg.preprocess).map_err(|source| {
                    CliError::Dsp {
                        context: format!("{} channel {}", file.display(), ch.name),
                        source,
                    }
                })?;
            for (k, seg) in segs.iter().enumerate() {
                let mut signal = ChannelSignal::new(ch.name.clone(), seg.iter().map(|&v| v as f32).collect());
                signal.scaled = true;
                let seg_rec = Recording::new(rec.subject_id.clone(), vec![signal], cfg.preprocess.target_rate_hz)
                    .map_err(|source| CliError::Signal {
                        context: format!("{} channel {} segment {k}", file.display(), ch.name),
                        source,
                    })?;
                let path = out.join(format!("{}__{}__seg{k}.sgh", stem(file), ch.name));
                write_container(&seg_rec, &path).map_err(|source| CliError::Signal {
                    context: path.display().to_string(),
                    source,
                })?;
                outputs.push(path);
            }
        }
    }
    write_manifest(out, "preprocess", cfg, &[input], &outputs, started)?;
    Ok(outputs)
}

/// Token stream over a directory of containers: scaled containers are used
/// as ready segments, raw ones go through the preprocessing pipeline.
pub fn load_corpus(cfg: &RunConfig, input: &Path, token_len: usize) -> Result<TokenStream> {
    let params = TokenizerParams::new(token_len, singlem::downstream::features::overlap_for(token_len))
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut raw = Vec::new();
    let mut stream = TokenStream::new(token_len);
    for file in list_containers(input)? {
        let rec = load(&file)?;
        if rec.channels.iter().all(|c| c.scaled) {
            if rec.sampling_rate_hz != cfg.preprocess.target_rate_hz {
                return Err(CliError::Malformed {
                    path: file,
                    reason: format!(
                        "scaled container at {} Hz, expected {} Hz",
                        rec.sampling_rate_hz, cfg.preprocess.target_rate_hz
                    ),
                });
            }
            for ch in &rec.channels {
                stream.push_segment(&ch.samples_f64(), &params);
            }
        } else {
            raw.push(rec);
        }
    }
    if !raw.is_empty() {
        let built = build_corpus(&raw, &cfg.preprocess, &params).map_err(|source| CliError::Dsp {
            context: format!("preprocessing corpus {}", input.display()),
            source,
        })?;
        stream.extend(&built);
    }
    if stream.is_empty() {
        return Err(CliError::EmptyInput(format!("no tokens in corpus {}", input.display())));
    }
    Ok(stream)
}

#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    pub resume: Option<PathBuf>,
    /// Halt (with a checkpoint) once this many steps have run in total.
    pub stop_after: Option<usize>,
}

/// Trains encoder and decoder; writes `checkpoint/`, `loss.csv`, and the
/// manifest under `out`. Returns the trainer in its final state.
pub fn cmd_pretrain(cfg: &RunConfig, corpus_dir: &Path, out: &Path, opts: &PretrainOptions) -> Result<Trainer> {
    let started = Instant::now();
    let encoder = cfg.encoder.resolve()?;
    let corpus = load_corpus(cfg, corpus_dir, encoder.token_len)?;
    let mut trainer = match &opts.resume {
        Some(dir) => {
            let t = Trainer::resume(&Checkpoint::load(dir)?, cfg.pretrain.clone())?;
            if t.encoder != encoder {
                return Err(CliError::Config(format!(
                    "checkpoint {} was trained with a different encoder configuration",
                    dir.display()
                )));
            }
            t
        }
        None => Trainer::new(encoder, cfg.pretrain.clone(), cfg.pretrain.total_steps(corpus.len()))?,
    };
    ensure_dir(out)?;
    let ckpt = out.join(CHECKPOINT);
    let every = cfg.pretrain.checkpoint_every;
    let stop = opts.stop_after.unwrap_or(usize::MAX);
    while !trainer.is_finished() && trainer.step_index() < stop {
        trainer.step(&corpus)?;
        if every > 0 && trainer.step_index() % every == 0 {
            trainer.checkpoint().save(&ckpt)?;
        }
    }
    trainer.checkpoint().save(&ckpt)?;
    let loss = out.join("loss.csv");
    write(&loss, loss_csv(trainer.history()).as_bytes())?;
    let mut inputs = vec![corpus_dir];
    if let Some(r) = &opts.resume {
        inputs.push(r);
    }
    write_manifest(out, "pretrain", cfg, &inputs, &[ckpt, loss], started)?;
    Ok(trainer)
}

/// Reads `labels.csv` and the trials it lists; raw containers are
/// preprocessed with rejection disabled.
pub fn load_trials(cfg: &RunConfig, dir: &Path) -> Result<Vec<Trial>> {
    let lpath = dir.join(LABELS);
    let text = fs::read_to_string(&lpath).map_err(|e| CliError::io(&lpath, e))?;
    let mut trials = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| CliError::Malformed {
            path: lpath.clone(),
            reason: format!("line {}: {reason}", i + 1),
        };
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let [file, subject, label] = cols[..] else {
            return Err(bad("expected file,subject,label".into()));
        };
        let label: usize = label.parse().map_err(|_| bad(format!("bad label {label:?}")))?;
        let rec = load(&dir.join(file))?;
        let mut trial = if rec.channels.iter().all(|c| c.scaled) {
            Trial {
                subject_id: subject.into(),
                label,
                channel_names: rec.channels.iter().map(|c| c.name.clone()).collect(),
                channels: rec.channels.iter().map(ChannelSignal::samples_f64).collect(),
            }
        } else {
            trial_from_recording(&rec, label, &cfg.preprocess, cfg.extract.pad_s)?
        };
        trial.subject_id = subject.into();
        trials.push(trial);
    }
    if trials.is_empty() {
        return Err(CliError::EmptyInput(format!("no trials listed in {}", lpath.display())));
    }
    Ok(trials)
}

/// Encoder features (or Fourier features when configured) for every trial.
pub fn compute_features(cfg: &RunConfig, trials: &[Trial], checkpoint: Option<&Path>) -> Result<Vec<TrialFeatures>> {
    match (cfg.extract.fourier_k, checkpoint) {
        (Some(k), _) => Ok(fourier_all(trials, k, cfg.preprocess.target_rate_hz)?),
        (None, Some(dir)) => {
            let weights = EncoderWeights::from_checkpoint(&Checkpoint::load(dir)?)?;
            Ok(extract_all(trials, &weights)?)
        }
        (None, None) => Err(CliError::Usage(
            "encoder features need --checkpoint (or use --fourier k=N)".into(),
        )),
    }
}

/// CSV with `subject,label` and one column per feature named `channel[i]`.
pub fn features_csv(features: &[TrialFeatures]) -> String {
    let mut out = String::from("subject,label");
    if let Some(f) = features.first() {
        for (name, r) in &f.channel_slices {
            for i in 0..r.len() {
                let _ = write!(out, ",{name}[{i}]");
            }
        }
    }
    out.push('\n');
    for f in features {
        let _ = write!(out, "{},{}", f.subject_id, f.label);
        for v in &f.vector {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_features_csv(path: &Path) -> Result<Vec<TrialFeatures>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad = |reason: String| CliError::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .split(',')
        .collect();
    if header.len() < 3 || header[0] != "subject" || header[1] != "label" {
        return Err(bad("header must start with subject,label and list features".into()));
    }
    let mut slices: Vec<(String, std::ops::Range<usize>)> = Vec::new();
    for (i, col) in header[2..].iter().enumerate() {
        let name = col
            .rsplit_once('[')
            .map(|(n, _)| n)
            .ok_or_else(|| bad(format!("column {col:?} is not channel[index]")))?;
        match slices.last_mut() {
            Some((last, r)) if last == name => r.end = i + 1,
            _ => slices.push((name.to_string(), i..i + 1)),
        }
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != header.len() {
            return Err(bad(format!(
                "row {} has {} columns, header has {}",
                n + 2,
                cols.len(),
                header.len()
            )));
        }
        let label = cols[1].parse().map_err(|_| bad(format!("row {}: bad label", n + 2)))?;
        let vector = cols[2..]
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("row {}: {e}", n + 2)))?;
        out.push(TrialFeatures {
            subject_id: cols[0].to_string(),
            label,
            vector,
            channel_slices: slices.clone(),
        });
    }
    if out.is_empty() {
        return Err(CliError::EmptyInput(format!("no feature rows in {}", path.display())));
    }
    Ok(out)
}

/// Extracts features for the trials in `trials_dir` into `out/features.csv`.
pub fn cmd_extract(cfg: &RunConfig, trials_dir: &Path, checkpoint: Option<&Path>, out: &Path) -> Result<PathBuf> {
    let started = Instant::now();
    let trials = load_trials(cfg, trials_dir)?;
    let features = compute_features(cfg, &trials, checkpoint)?;
    ensure_dir(out)?;
    let path = out.join(FEATURES);
    write(&path, features_csv(&features).as_bytes())?;
    let mut inputs = vec![trials_dir];
    inputs.extend(checkpoint);
    write_manifest(out, "extract", cfg, &inputs, std::slice::from_ref(&path), started)?;
    Ok(path)
}

/// LOSO evaluation from a features CSV, or from a trials directory plus
/// checkpoint. Writes `report.csv`, `summary.txt`, and with `per_channel`
/// also `per_channel.csv`.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    input: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
    per_channel: bool,
) -> Result<EvalReport> {
    let started = Instant::now();
    let features = if input.is_dir() {
        compute_features(cfg, &load_trials(cfg, input)?, checkpoint)?
    } else {
        parse_features_csv(input)?
    };
    let eval = cfg.evaluate.to_eval_config(cfg.seed)?;
    let report = loso_evaluate(&features, &eval)?;
    ensure_dir(out)?;
    let method = match (cfg.extract.fourier_k, input.is_dir()) {
        (Some(k), true) => format!("fourier-k{k}"),
        (None, true) => "singlem".to_string(),
        _ => stem(input),
    };
    let mut outputs = vec![out.join("report.csv"), out.join("summary.txt")];
    write(&outputs[0], report.to_csv().as_bytes())?;
    write(&outputs[1], report.summary(&method).as_bytes())?;
    if per_channel {
        let rows = per_channel_evaluate(&features, &eval)?;
        let p = out.join("per_channel.csv");
        write(&p, per_channel_csv(&rows).as_bytes())?;
        outputs.push(p);
    }
    let mut inputs = vec![input];
    inputs.extend(checkpoint);
    write_manifest(out, "evaluate", cfg, &inputs, &outputs, started)?;
    Ok(report)
}

/// Byte contents of every regular file under `dir` except manifests,
/// keyed by relative path. Used to compare runs.
pub fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
            let path = entry.map_err(|e| CliError::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if path.file_name().is_some_and(|n| n != MANIFEST) {
                let rel = path.strip_prefix(root).unwrap_or(&path).display().to_string();
                out.insert(rel, fs::read(&path).map_err(|e| CliError::io(&path, e))?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}
