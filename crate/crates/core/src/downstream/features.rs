use std::ops::Range;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::DownstreamError;
use crate::dsp::{preprocess_channel, PreprocessConfig};
use crate::encoder::EncoderWeights;
use crate::signal_io::{Recording, SyntheticSpec};
use crate::tokenizer::{tokenize, TokenizerParams};

/// One labelled multi-channel trial at the model rate, already preprocessed.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub subject_id: String,
    pub label: usize,
    pub channel_names: Vec<String>,
    pub channels: Vec<Vec<f64>>,
}

impl Trial {
    pub fn validate(&self) -> Result<(), DownstreamError> {
        if self.channels.is_empty() || self.channels.len() != self.channel_names.len() {
            return Err(DownstreamError::EmptyInput(format!(
                "trial of {} has {} channels and {} names",
                self.subject_id,
                self.channels.len(),
                self.channel_names.len()
            )));
        }
        let n = self.channels[0].len();
        if self.channels.iter().any(|c| c.len() != n) {
            return Err(DownstreamError::RaggedChannels(self.subject_id.clone()));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    /// The trial reduced to the named channels, in the given order.
    pub fn select(&self, names: &[&str]) -> Option<Trial> {
        let idx: Option<Vec<usize>> = names
            .iter()
            .map(|n| self.channel_names.iter().position(|c| c == n))
            .collect();
        let idx = idx?;
        Some(Trial {
            subject_id: self.subject_id.clone(),
            label: self.label,
            channel_names: idx.iter().map(|&i| self.channel_names[i].clone()).collect(),
            channels: idx.iter().map(|&i| self.channels[i].clone()).collect(),
        })
    }
}

/// Flat per-trial feature vector with the block owned by each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialFeatures {
    pub subject_id: String,
    pub label: usize,
    pub vector: Vec<f64>,
    pub channel_slices: Vec<(String, Range<usize>)>,
}

impl TrialFeatures {
    /// Features of a single channel's block.
    pub fn restrict(&self, channel: &str) -> Option<TrialFeatures> {
        let (name, r) = self.channel_slices.iter().find(|(n, _)| n == channel)?;
        Some(TrialFeatures {
            subject_id: self.subject_id.clone(),
            label: self.label,
            vector: self.vector[r.clone()].to_vec(),
            channel_slices: vec![(name.clone(), 0..r.len())],
        })
    }
}

fn assemble(trial: &Trial, blocks: Vec<Vec<f64>>) -> TrialFeatures {
    let mut vector = Vec::with_capacity(blocks.iter().map(Vec::len).sum());
    let mut channel_slices = Vec::with_capacity(blocks.len());
    for (name, b) in trial.channel_names.iter().zip(blocks) {
        let start = vector.len();
        vector.extend(b);
        channel_slices.push((name.clone(), start..vector.len()));
    }
    TrialFeatures {
        subject_id: trial.subject_id.clone(),
        label: trial.label,
        vector,
        channel_slices,
    }
}

/// Token overlap for a given token length: a quarter of the token, which is
/// 32 samples for one-second tokens at 128 Hz.
pub fn overlap_for(token_len: usize) -> usize {
    token_len / 4
}

/// Tokenizes every channel, encodes it with frozen weights, and concatenates
/// the flattened `(L, r)` outputs in channel order.
pub fn extract_features(trial: &Trial, weights: &EncoderWeights) -> Result<TrialFeatures, DownstreamError> {
    trial.validate()?;
    let params = TokenizerParams::new(weights.config.token_len, overlap_for(weights.config.token_len))?;
    let seqs = trial
        .channels
        .iter()
        .map(|c| tokenize(c, &params))
        .collect::<Result<Vec<_>, _>>()?;
    let reps = weights.encode_batch(&seqs)?;
    let blocks = reps.into_iter().map(|r| r.concat()).collect();
    Ok(assemble(trial, blocks))
}

/// [`extract_features`] over many trials in parallel; order is preserved.
pub fn extract_all(trials: &[Trial], weights: &EncoderWeights) -> Result<Vec<TrialFeatures>, DownstreamError> {
    trials.par_iter().map(|t| extract_features(t, weights)).collect()
}

/// Top-`k_per_second * seconds` positive-frequency DFT coefficients per
/// channel by magnitude (ties to the lower bin), as magnitudes followed by
/// phases.
pub fn fourier_features(trial: &Trial, k_per_second: usize, rate_hz: f64) -> Result<TrialFeatures, DownstreamError> {
    trial.validate()?;
    let n = trial.n_samples();
    let count = (k_per_second as f64 * n as f64 / rate_hz).round() as usize;
    let available = n / 2;
    if count == 0 || count > available {
        return Err(DownstreamError::TooFewBins {
            requested: count,
            available,
        });
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let blocks = trial
        .channels
        .iter()
        .map(|x| {
            let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft.process(&mut buf);
            let mut bins: Vec<usize> = (1..=available).collect();
            bins.sort_by(|&a, &b| buf[b].norm().total_cmp(&buf[a].norm()).then(a.cmp(&b)));
            bins.truncate(count);
            let mut out: Vec<f64> = bins.iter().map(|&k| buf[k].norm()).collect();
            out.extend(bins.iter().map(|&k| buf[k].arg()));
            out
        })
        .collect();
    Ok(assemble(trial, blocks))
}

pub fn fourier_all(trials: &[Trial], k_per_second: usize, rate_hz: f64) -> Result<Vec<TrialFeatures>, DownstreamError> {
    trials
        .par_iter()
        .map(|t| fourier_features(t, k_per_second, rate_hz))
        .collect()
}

/// Preprocesses a raw recording into a trial (no artifact rejection),
/// dropping `pad_s` seconds of filter settling from each end.
pub fn trial_from_recording(
    rec: &Recording,
    label: usize,
    preprocess: &PreprocessConfig,
    pad_s: f64,
) -> Result<Trial, DownstreamError> {
    let cfg = PreprocessConfig {
        reject_enabled: false,
        ..preprocess.clone()
    };
    let pad = (pad_s * cfg.target_rate_hz).round() as usize;
    let channels = rec
        .channels
        .iter()
        .map(|ch| {
            let mut segs = preprocess_channel(&ch.samples_f64(), rec.sampling_rate_hz, &cfg)?;
            let seg = segs.pop().unwrap_or_default();
            if seg.len() <= 2 * pad {
                return Err(DownstreamError::EmptyInput(format!(
                    "channel {} too short to drop {pad_s} s padding",
                    ch.name
                )));
            }
            Ok(seg[pad..seg.len() - pad].to_vec())
        })
        .collect::<Result<Vec<_>, DownstreamError>>()?;
    Ok(Trial {
        subject_id: rec.subject_id.clone(),
        label,
        channel_names: rec.channels.iter().map(|c| c.name.clone()).collect(),
        channels,
    })
}

/// `trials_per_class` synthetic trials of each of `n_classes` classes for
/// every subject. Recordings last `spec.duration_s`, of which `pad_s` at
/// each end is discarded after filtering.
pub fn synthetic_trials(
    spec: &SyntheticSpec,
    n_classes: usize,
    trials_per_class: usize,
    pad_s: f64,
    preprocess: &PreprocessConfig,
) -> Result<Vec<Trial>, DownstreamError> {
    let jobs: Vec<(usize, usize, usize)> = (0..spec.n_subjects)
        .flat_map(|s| (0..n_classes).flat_map(move |c| (0..trials_per_class).map(move |t| (s, c, t))))
        .collect();
    jobs.par_iter()
        .map(|&(s, c, t)| {
            let rec = crate::signal_io::generate_recording(spec, s, c, t)?;
            trial_from_recording(&rec, c, preprocess, pad_s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn trial(channels: Vec<Vec<f64>>) -> Trial {
        Trial {
            subject_id: "S000".into(),
            label: 0,
            channel_names: (0..channels.len()).map(|i| format!("E{i}")).collect(),
            channels,
        }
    }

    #[test]
    fn fourier_picks_the_sinusoid_bin() {
        let amp = 0.3;
        let phase = 0.7;
        let x: Vec<f64> = (0..128)
            .map(|t| amp * (2.0 * PI * 10.0 * t as f64 / 128.0 + phase).cos())
            .collect();
        let f = fourier_features(&trial(vec![x]), 1, 128.0).unwrap();
        assert_eq!(f.vector.len(), 2);
        assert!((f.vector[0] - amp * 64.0).abs() < 1e-9);
        assert!((f.vector[1] - phase).abs() < 1e-9);
    }

    #[test]
    fn fourier_length_and_ties() {
        let t = trial(vec![vec![0.0; 1280]]);
        let f = fourier_features(&t, 8, 128.0).unwrap();
        assert_eq!(f.vector.len(), 160);
        // All-zero spectrum: every magnitude ties, so phases come from bins 1..=80.
        assert!(f.vector.iter().all(|&v| v == 0.0));
        assert!(matches!(
            fourier_features(&trial(vec![vec![0.0; 16]]), 9, 1.0),
            Err(DownstreamError::TooFewBins { .. })
        ));
    }

    #[test]
    fn restrict_extracts_channel_block() {
        let t = trial(vec![vec![1.0; 128], vec![2.0; 128]]);
        let f = fourier_features(&t, 1, 128.0).unwrap();
        let r = f.restrict("E1").unwrap();
        assert_eq!(r.vector, f.vector[2..4].to_vec());
        assert!(f.restrict("nope").is_none());
    }
}
