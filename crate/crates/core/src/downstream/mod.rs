//! Frozen-feature evaluation: per-channel feature extraction with late
//! fusion, an RBF SVM tuned on a validation split, leave-one-subject-out
//! scoring, and per-channel breakdowns.

pub mod features;
pub mod metrics;
pub mod svm;

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dsp::DspError;
use crate::encoder::EncoderError;
use crate::signal_io::SignalIoError;
use crate::tokenizer::TokenizerError;

pub use features::{
    extract_all, extract_features, fourier_all, fourier_features, synthetic_trials, trial_from_recording, Trial,
    TrialFeatures,
};
pub use metrics::{confusion_matrix, metrics, metrics_from_confusion, Metrics};
pub use svm::{Kernel, SvmModel, SvmParams};

#[derive(Debug, Error)]
pub enum DownstreamError {
    #[error("SMO did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("training data contains a single class")]
    SingleClass,
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("label {label} outside 0..{n_classes}")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("channels of trial from {0} differ in length")]
    RaggedChannels(String),
    #[error("requested {requested} Fourier coefficients but only {available} positive bins exist")]
    TooFewBins { requested: usize, available: usize },
    #[error("leave-one-subject-out needs at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("feature vectors differ in length ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("no channel named {0}")]
    UnknownChannel(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    SignalIo(#[from] SignalIoError),
}

type Result<T> = std::result::Result<T, DownstreamError>;

/// Per-dimension standardization fitted on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Population mean and standard deviation; a constant dimension gets
    /// std 1 so it maps to zero.
    pub fn fit(rows: &[&[f64]]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| DownstreamError::EmptyInput("cannot fit a scaler on no rows".into()))?;
        let d = first.len();
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(DownstreamError::DimensionMismatch(d, r.len()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(*r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierKind {
    Rbf,
    Linear,
}

/// Hyperparameter grid; `gammas` is ignored for the linear kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub cs: Vec<f64>,
    pub gammas: Vec<f64>,
}

impl Default for Grid {
    /// Seven log-spaced C values over `[1e-2, 1e3]` and six gammas over
    /// `[1e-4, 1e1]`.
    fn default() -> Self {
        Self {
            cs: (0..7).map(|i| 10f64.powf(-2.0 + 5.0 * i as f64 / 6.0)).collect(),
            gammas: (0..6).map(|i| 10f64.powi(i - 4)).collect(),
        }
    }
}

impl Grid {
    pub fn single(c: f64, gamma: f64) -> Self {
        Self {
            cs: vec![c],
            gammas: vec![gamma],
        }
    }

    /// Cells in tie-break order: ascending C, then ascending gamma.
    fn cells(&self, kind: ClassifierKind) -> Vec<SvmParams> {
        let mut cs = self.cs.clone();
        let mut gs = self.gammas.clone();
        cs.sort_by(f64::total_cmp);
        gs.sort_by(f64::total_cmp);
        match kind {
            ClassifierKind::Linear => cs.into_iter().map(SvmParams::linear).collect(),
            ClassifierKind::Rbf => cs
                .iter()
                .flat_map(|&c| gs.iter().map(move |&g| SvmParams::rbf(c, g)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub grid: Grid,
    pub kind: ClassifierKind,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grid: Grid::default(),
            kind: ClassifierKind::Rbf,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

/// Best grid cell and the model fitted with it on the training rows.
#[derive(Debug, Clone)]
pub struct Tuned {
    pub params: SvmParams,
    pub val_f1: f64,
    pub model: SvmModel,
}

/// Exhaustive grid search maximizing validation macro-F1. Ties keep the
/// earliest cell, i.e. the smallest C and then the smallest gamma. Cells
/// whose solver hits the iteration cap are skipped; the search fails only
/// when every cell does.
pub fn tune_hyperparams(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    val_x: &[Vec<f64>],
    val_y: &[usize],
    grid: &Grid,
    kind: ClassifierKind,
    n_classes: usize,
) -> Result<Tuned> {
    let cells = grid.cells(kind);
    if cells.is_empty() {
        return Err(DownstreamError::EmptyInput("empty hyperparameter grid".into()));
    }
    let rows: Vec<&[f64]> = train_x.iter().map(Vec::as_slice).collect();
    let gram = svm::Gram::new(&rows);
    let mut best: Option<Tuned> = None;
    let mut last_err = None;
    for params in cells {
        let model = match SvmModel::fit_with_gram(&rows, &gram, train_y, &params) {
            Ok(m) => m,
            Err(e @ DownstreamError::NoConvergence(_)) => {
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let pred = model.predict_all(val_x);
        let f1 = metrics(val_y, &pred, n_classes)?.macro_f1;
        if best.as_ref().is_none_or(|b| f1 > b.val_f1) {
            best = Some(Tuned {
                params,
                val_f1: f1,
                model,
            });
        }
    }
    best.ok_or_else(|| last_err.expect("every skipped cell recorded its error"))
}

/// Index sets for one held-out subject.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub subject_id: String,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per distinct subject (sorted by id). The remaining trials are
/// split per label: a seeded shuffle sends `round(val_fraction * n)` of each
/// label (at least one when the label has two or more trials) to validation.
pub fn loso_splits(labels: &[(String, usize)], val_fraction: f64, seed: u64) -> Result<Vec<FoldSplit>> {
    let subjects: BTreeSet<&str> = labels.iter().map(|(s, _)| s.as_str()).collect();
    if subjects.len() < 2 {
        return Err(DownstreamError::TooFewSubjects(subjects.len()));
    }
    let classes: BTreeSet<usize> = labels.iter().map(|(_, l)| *l).collect();
    Ok(subjects
        .into_iter()
        .enumerate()
        .map(|(fold, subject)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(fold as u64);
            let test: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].0 == subject).collect();
            let mut train = Vec::new();
            let mut val = Vec::new();
            for &c in &classes {
                let mut idx: Vec<usize> = (0..labels.len())
                    .filter(|&i| labels[i].0 != subject && labels[i].1 == c)
                    .collect();
                idx.shuffle(&mut rng);
                let mut n_val = (val_fraction * idx.len() as f64).round() as usize;
                if idx.len() >= 2 {
                    n_val = n_val.clamp(1, idx.len() - 1);
                } else {
                    n_val = 0;
                }
                val.extend_from_slice(&idx[..n_val]);
                train.extend_from_slice(&idx[n_val..]);
            }
            train.sort_unstable();
            val.sort_unstable();
            FoldSplit {
                subject_id: subject.to_string(),
                train,
                val,
                test,
            }
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub split: FoldSplit,
    pub scaler: Scaler,
    pub params: SvmParams,
    pub val_f1: f64,
    pub metrics: Metrics,
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population statistics.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub n_classes: usize,
    pub folds: Vec<FoldResult>,
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
    pub kappa: MeanStd,
}

impl EvalReport {
    fn from_folds(n_classes: usize, folds: Vec<FoldResult>) -> Self {
        let col = |f: fn(&Metrics) -> f64| MeanStd::of(&folds.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
        Self {
            n_classes,
            accuracy: col(|m| m.accuracy),
            macro_f1: col(|m| m.macro_f1),
            kappa: col(|m| m.kappa),
            folds,
        }
    }

    pub fn mean_metrics(&self) -> Metrics {
        Metrics {
            accuracy: self.accuracy.mean,
            macro_f1: self.macro_f1.mean,
            kappa: self.kappa.mean,
        }
    }

    /// One row per fold, then `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,subject,n_test,c,gamma,accuracy,macro_f1,kappa,confusion\n");
        for (i, f) in self.folds.iter().enumerate() {
            let gamma = match f.params.kernel {
                Kernel::Rbf { gamma } => gamma.to_string(),
                Kernel::Linear => String::new(),
            };
            let confusion = f
                .confusion
                .iter()
                .map(|r| r.iter().map(usize::to_string).collect::<Vec<_>>().join(" "))
                .collect::<Vec<_>>()
                .join("|");
            let _ = writeln!(
                out,
                "{i},{},{},{},{gamma},{},{},{},{confusion}",
                f.split.subject_id,
                f.split.test.len(),
                f.params.c,
                f.metrics.accuracy,
                f.metrics.macro_f1,
                f.metrics.kappa
            );
        }
        let _ = writeln!(
            out,
            "mean,,,,,{},{},{},",
            self.accuracy.mean, self.macro_f1.mean, self.kappa.mean
        );
        let _ = writeln!(
            out,
            "std,,,,,{},{},{},",
            self.accuracy.std, self.macro_f1.std, self.kappa.std
        );
        out
    }

    /// Mean ± std per metric in percent, one row per method.
    pub fn summary(&self, method: &str) -> String {
        let pct = |m: MeanStd| format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.std);
        format!(
            "{:<16} {:>16} {:>16} {:>16}\n{:<16} {:>16} {:>16} {:>16}\n",
            "method",
            "accuracy (%)",
            "macro-F1 (%)",
            "kappa (%)",
            method,
            pct(self.accuracy),
            pct(self.macro_f1),
            pct(self.kappa)
        )
    }
}

/// Leave-one-subject-out evaluation over precomputed features. Each fold
/// standardizes with training-split statistics, tunes on validation, and
/// scores the held-out subject with the model fitted on the training split.
pub fn loso_evaluate(features: &[TrialFeatures], cfg: &EvalConfig) -> Result<EvalReport> {
    let first = features
        .first()
        .ok_or_else(|| DownstreamError::EmptyInput("no trials to evaluate".into()))?;
    let dim = first.vector.len();
    if let Some(f) = features.iter().find(|f| f.vector.len() != dim) {
        return Err(DownstreamError::DimensionMismatch(dim, f.vector.len()));
    }
    let n_classes = features.iter().map(|f| f.label).max().unwrap_or(0) + 1;
    let labels: Vec<(String, usize)> = features.iter().map(|f| (f.subject_id.clone(), f.label)).collect();
    let splits = loso_splits(&labels, cfg.val_fraction, cfg.seed)?;
    let folds = splits
        .into_par_iter()
        .map(|split| run_fold(features, split, cfg, n_classes))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_folds(n_classes, folds))
}

fn run_fold(features: &[TrialFeatures], split: FoldSplit, cfg: &EvalConfig, n_classes: usize) -> Result<FoldResult> {
    let rows = |idx: &[usize]| -> Vec<&[f64]> { idx.iter().map(|&i| features[i].vector.as_slice()).collect() };
    let ys = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| features[i].label).collect() };
    let scaler = Scaler::fit(&rows(&split.train))?;
    let scale = |idx: &[usize]| -> Vec<Vec<f64>> { rows(idx).into_iter().map(|r| scaler.transform(r)).collect() };
    let (train_x, val_x, test_x) = (scale(&split.train), scale(&split.val), scale(&split.test));
    let (train_y, val_y, test_y) = (ys(&split.train), ys(&split.val), ys(&split.test));
    let tuned = if val_x.is_empty() {
        // Nothing to tune on: fall back to the first grid cell.
        let first = cfg
            .grid
            .cells(cfg.kind)
            .into_iter()
            .next()
            .ok_or_else(|| DownstreamError::EmptyInput("empty hyperparameter grid".into()))?;
        Tuned {
            params: first,
            val_f1: f64::NAN,
            model: SvmModel::fit(&train_x, &train_y, &first)?,
        }
    } else {
        tune_hyperparams(&train_x, &train_y, &val_x, &val_y, &cfg.grid, cfg.kind, n_classes)?
    };
    let pred = tuned.model.predict_all(&test_x);
    let confusion = confusion_matrix(&test_y, &pred, n_classes)?;
    Ok(FoldResult {
        metrics: metrics_from_confusion(&confusion),
        confusion,
        scaler,
        params: tuned.params,
        val_f1: tuned.val_f1,
        split,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelResult {
    pub channel: String,
    pub metrics: Metrics,
    /// `(acc - min) / (max - min)` over channels; 1 for every channel when
    /// all accuracies are equal.
    pub normalized_accuracy: f64,
}

/// Runs [`loso_evaluate`] on each channel's feature block alone, in the
/// channel order of the first trial.
pub fn per_channel_evaluate(features: &[TrialFeatures], cfg: &EvalConfig) -> Result<Vec<ChannelResult>> {
    let first = features
        .first()
        .ok_or_else(|| DownstreamError::EmptyInput("no trials to evaluate".into()))?;
    let names: Vec<String> = first.channel_slices.iter().map(|(n, _)| n.clone()).collect();
    let scored = names
        .par_iter()
        .map(|name| {
            let restricted = features
                .iter()
                .map(|f| {
                    f.restrict(name)
                        .ok_or_else(|| DownstreamError::UnknownChannel(name.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((name.clone(), loso_evaluate(&restricted, cfg)?.mean_metrics()))
        })
        .collect::<Result<Vec<_>>>()?;
    let lo = scored.iter().map(|(_, m)| m.accuracy).fold(f64::INFINITY, f64::min);
    let hi = scored.iter().map(|(_, m)| m.accuracy).fold(f64::NEG_INFINITY, f64::max);
    Ok(scored
        .into_iter()
        .map(|(channel, metrics)| ChannelResult {
            normalized_accuracy: if hi > lo {
                (metrics.accuracy - lo) / (hi - lo)
            } else {
                1.0
            },
            channel,
            metrics,
        })
        .collect())
}

pub fn per_channel_csv(results: &[ChannelResult]) -> String {
    let mut out = String::from("channel,accuracy,f1,kappa,normalized_accuracy\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.channel, r.metrics.accuracy, r.metrics.macro_f1, r.metrics.kappa, r.normalized_accuracy
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feat(subject: &str, label: usize, v: Vec<f64>) -> TrialFeatures {
        let n = v.len();
        TrialFeatures {
            subject_id: subject.into(),
            label,
            vector: v,
            channel_slices: vec![("E0".into(), 0..n)],
        }
    }

    #[test]
    fn default_grid_shape() {
        let g = Grid::default();
        assert_eq!(g.cs.len(), 7);
        assert_eq!(g.gammas.len(), 6);
        assert!((g.cs[0] - 1e-2).abs() < 1e-15 && (g.cs[6] - 1e3).abs() < 1e-9);
        assert_eq!(g.gammas[0], 1e-4);
        assert_eq!(g.gammas[5], 10.0);
    }

    #[test]
    fn scaler_uses_population_std_and_guards_constants() {
        let rows = [[1.0, 5.0], [3.0, 5.0]];
        let r: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let s = Scaler::fit(&r).unwrap();
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        assert_eq!(s.transform(&[3.0, 7.0]), vec![1.0, 2.0]);
    }

    #[test]
    fn splits_hold_out_each_subject_once() {
        let labels: Vec<(String, usize)> = (0..3)
            .flat_map(|s| (0..10).map(move |t| (format!("S{s}"), t % 2)))
            .collect();
        let splits = loso_splits(&labels, 0.2, 7).unwrap();
        assert_eq!(splits.len(), 3);
        for (k, s) in splits.iter().enumerate() {
            assert_eq!(s.subject_id, format!("S{k}"));
            assert_eq!(s.test.len(), 10);
            assert_eq!(s.val.len(), 4);
            assert_eq!(s.train.len(), 16);
            assert!(s.train.iter().chain(&s.val).all(|&i| labels[i].0 != s.subject_id));
        }
        assert_eq!(splits, loso_splits(&labels, 0.2, 7).unwrap());
        assert!(matches!(
            loso_splits(&labels[..10], 0.2, 7),
            Err(DownstreamError::TooFewSubjects(1))
        ));
    }

    #[test]
    fn single_cell_grid_returns_it() {
        let x = vec![vec![0.0], vec![1.0], vec![4.0], vec![5.0]];
        let y = vec![0, 0, 1, 1];
        let t = tune_hyperparams(&x, &y, &x, &y, &Grid::single(3.0, 0.5), ClassifierKind::Rbf, 2).unwrap();
        assert_eq!(t.params, SvmParams::rbf(3.0, 0.5));
    }

    #[test]
    fn tuning_prefers_the_cell_that_separates() {
        // Classes interleave at fine scale; only a large gamma separates them.
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let y: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let grid = Grid {
            cs: vec![100.0],
            gammas: vec![1e-4, 10.0],
        };
        let t = tune_hyperparams(&x, &y, &x, &y, &grid, ClassifierKind::Rbf, 2).unwrap();
        assert_eq!(t.params.kernel, Kernel::Rbf { gamma: 10.0 });
        assert_eq!(t.val_f1, 1.0);
    }

    #[test]
    fn separable_task_scores_perfectly_with_zero_std() {
        let feats: Vec<TrialFeatures> = (0..3)
            .flat_map(|s| {
                (0..10).map(move |t| {
                    let l = t % 2;
                    feat(&format!("S{s}"), l, vec![l as f64 * 4.0 + 0.1 * t as f64, s as f64])
                })
            })
            .collect();
        let r = loso_evaluate(&feats, &EvalConfig::default()).unwrap();
        assert_eq!(r.folds.len(), 3);
        assert_eq!(r.accuracy, MeanStd { mean: 1.0, std: 0.0 });
        assert_eq!(r.kappa.mean, 1.0);
        assert!(r.to_csv().lines().count() == 6);
        assert!(r.summary("x").contains("100.00 ± 0.00"));
    }

    #[test]
    fn single_channel_per_channel_matches_full() {
        let feats: Vec<TrialFeatures> = (0..3)
            .flat_map(|s| (0..8).map(move |t| feat(&format!("S{s}"), t % 2, vec![(t % 2) as f64 + 0.05 * t as f64])))
            .collect();
        let cfg = EvalConfig::default();
        let full = loso_evaluate(&feats, &cfg).unwrap().mean_metrics();
        let per = per_channel_evaluate(&feats, &cfg).unwrap();
        assert_eq!(per.len(), 1);
        assert_eq!(per[0].metrics, full);
        assert_eq!(per[0].normalized_accuracy, 1.0);
        assert!(per_channel_csv(&per).starts_with("channel,accuracy,f1,kappa,normalized_accuracy\nE0,"));
    }
}
