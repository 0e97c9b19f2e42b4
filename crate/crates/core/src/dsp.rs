//! Per-channel preprocessing: zero-phase FIR band-pass and notch filtering,
//! polyphase resampling, amplitude-based artifact rejection and scaling.
//!
//! Also hosts the exact 13–50 Hz DFT-mask filter applied to 128-sample tokens
//! by the spectral reconstruction loss.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Microvolts to volts.
pub const VOLTS_PER_UV: f64 = 1e-6;
/// Length of a one-second token at the target rate.
pub const BP_TOKEN_LEN: usize = 128;
pub const BP_LOW_BIN: usize = 13;
pub const BP_HIGH_BIN: usize = 50;
/// Hamming-windowed sinc length used when none is configured.
pub const DEFAULT_NUM_TAPS: usize = 513;
pub const NOTCH_WIDTH_HZ: f64 = 2.0;
const KAISER_BETA: f64 = 8.6;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("invalid filter band: {0}")]
    InvalidBand(String),
    #[error("signal of {len} samples too short for {taps} taps (need > {need})")]
    SignalTooShort { len: usize, taps: usize, need: usize },
    #[error("empty signal")]
    EmptySignal,
    #[error("invalid sampling rate {0}")]
    InvalidRate(f64),
    #[error("token has {0} samples, expected 128")]
    WrongLength(usize),
    #[error("scaled sample {value} at index {index} is outside (-1, 1)")]
    AmplitudeOutOfRange { index: usize, value: f64 },
    #[error("non-finite input sample at index {0}")]
    NonFinite(usize),
}

type Result<T> = std::result::Result<T, DspError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Bandpass,
    Notch,
    BandpassBetaGamma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    pub low_hz: f64,
    pub high_hz: f64,
    pub notch_hz: f64,
    pub num_taps: usize,
}

impl FilterSpec {
    pub fn bandpass(low_hz: f64, high_hz: f64, num_taps: usize) -> Self {
        Self {
            kind: FilterKind::Bandpass,
            low_hz,
            high_hz,
            notch_hz: 0.0,
            num_taps,
        }
    }

    pub fn notch(notch_hz: f64, num_taps: usize) -> Self {
        Self {
            kind: FilterKind::Notch,
            low_hz: notch_hz - NOTCH_WIDTH_HZ / 2.0,
            high_hz: notch_hz + NOTCH_WIDTH_HZ / 2.0,
            notch_hz,
            num_taps,
        }
    }

    pub fn beta_gamma(num_taps: usize) -> Self {
        Self {
            kind: FilterKind::BandpassBetaGamma,
            low_hz: BP_LOW_BIN as f64,
            high_hz: BP_HIGH_BIN as f64,
            notch_hz: 0.0,
            num_taps,
        }
    }
}

/// Filter length for a source rate: 513 taps, grown to about one second of
/// samples above 512 Hz so the 2 Hz notch keeps its depth.
pub fn default_num_taps(rate_hz: f64) -> usize {
    let one_second = rate_hz.ceil() as usize | 1;
    DEFAULT_NUM_TAPS.max(one_second)
}

fn hamming(n: usize, len: usize) -> f64 {
    if len == 1 {
        return 1.0;
    }
    0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Unit-DC-gain Hamming-windowed sinc low-pass with cutoff `fc` (cycles/sample).
fn lowpass_taps(fc: f64, num_taps: usize) -> Vec<f64> {
    let mid = num_taps / 2;
    let mut h: Vec<f64> = (0..num_taps)
        .map(|n| {
            // Evaluate on the first half only so the taps mirror bit-exactly.
            let k = n.min(num_taps - 1 - n);
            2.0 * fc * sinc(2.0 * fc * (k as f64 - mid as f64)) * hamming(k, num_taps)
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// Linear-phase windowed-sinc taps (odd length, symmetric).
pub fn design_fir(spec: &FilterSpec, rate_hz: f64) -> Result<Vec<f64>> {
    if !(rate_hz > 0.0 && rate_hz.is_finite()) {
        return Err(DspError::InvalidRate(rate_hz));
    }
    if spec.num_taps < 3 || spec.num_taps.is_multiple_of(2) {
        return Err(DspError::InvalidBand(format!(
            "num_taps must be odd and >= 3, got {}",
            spec.num_taps
        )));
    }
    let nyquist = rate_hz / 2.0;
    let (low, high) = match spec.kind {
        FilterKind::Bandpass => (spec.low_hz, spec.high_hz),
        FilterKind::BandpassBetaGamma => (BP_LOW_BIN as f64, BP_HIGH_BIN as f64),
        FilterKind::Notch => (
            spec.notch_hz - NOTCH_WIDTH_HZ / 2.0,
            spec.notch_hz + NOTCH_WIDTH_HZ / 2.0,
        ),
    };
    if !(low > 0.0 && low < high && high < nyquist) {
        return Err(DspError::InvalidBand(format!("need 0 < {low} < {high} < {nyquist}")));
    }
    let hi = lowpass_taps(high / rate_hz, spec.num_taps);
    let lo = lowpass_taps(low / rate_hz, spec.num_taps);
    let mut taps: Vec<f64> = hi.iter().zip(&lo).map(|(h, l)| h - l).collect();
    if spec.kind == FilterKind::Notch {
        taps.iter_mut().for_each(|v| *v = -*v);
        taps[spec.num_taps / 2] += 1.0;
    }
    Ok(taps)
}

/// Complex frequency response of `taps` at `freq_hz`.
pub fn frequency_response(taps: &[f64], freq_hz: f64, rate_hz: f64) -> Complex64 {
    let w = 2.0 * PI * freq_hz / rate_hz;
    taps.iter()
        .enumerate()
        .map(|(n, &h)| Complex64::from_polar(h, -w * n as f64))
        .sum()
}

fn fir_forward(taps: &[f64], x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (n, out) in y.iter_mut().enumerate() {
        let kmax = taps.len().min(n + 1);
        let mut acc = 0.0;
        for k in 0..kmax {
            acc += taps[k] * x[n - k];
        }
        *out = acc;
    }
    y
}

/// Forward-backward FIR application with odd-reflection padding of
/// `3 * taps.len()` samples at each end. Output has zero net phase.
pub fn filtfilt(taps: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let pad = 3 * taps.len();
    if x.len() <= pad {
        return Err(DspError::SignalTooShort {
            len: x.len(),
            taps: taps.len(),
            need: pad,
        });
    }
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let mut y = fir_forward(taps, &ext);
    y.reverse();
    let mut y = fir_forward(taps, &y);
    y.reverse();
    Ok(y[pad..pad + n].to_vec())
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn kaiser(n: usize, len: usize, beta: f64) -> f64 {
    let r = 2.0 * n as f64 / (len - 1) as f64 - 1.0;
    bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / bessel_i0(beta)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Reduced `(up, down)` when both rates are integers with a manageable ratio.
fn rational_ratio(from_hz: f64, to_hz: f64) -> Option<(usize, usize)> {
    let integral = |v: f64| (v - v.round()).abs() < 1e-9 && v.round() >= 1.0;
    if !integral(from_hz) || !integral(to_hz) {
        return None;
    }
    let (f, t) = (from_hz.round() as u64, to_hz.round() as u64);
    let g = gcd(f, t);
    let (up, down) = ((t / g) as usize, (f / g) as usize);
    (up.max(down) <= 1024).then_some((up, down))
}

fn resample_poly(x: &[f64], up: usize, down: usize, out_len: usize) -> Vec<f64> {
    let max_rate = up.max(down);
    let half = 10 * max_rate;
    let len = 2 * half + 1;
    let fc = 1.0 / max_rate as f64;
    let mut h: Vec<f64> = (0..len)
        .map(|n| fc * sinc(fc * (n as f64 - half as f64)) * kaiser(n, len, KAISER_BETA))
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v *= up as f64 / sum);

    (0..out_len)
        .map(|m| {
            let j0 = m * down + half;
            let mut acc = 0.0;
            let mut k = j0 % up;
            while k < len && k <= j0 {
                let idx = (j0 - k) / up;
                if idx < x.len() {
                    acc += h[k] * x[idx];
                }
                k += up;
            }
            acc
        })
        .collect()
}

fn resample_linear(x: &[f64], from_hz: f64, to_hz: f64, out_len: usize) -> Vec<f64> {
    let filtered;
    let src = if to_hz < from_hz {
        // Anti-alias at 90% of the new Nyquist; centred convolution keeps phase.
        let taps = lowpass_taps(0.45 * to_hz / from_hz, 4 * (from_hz / to_hz).ceil() as usize * 10 + 1);
        let mid = taps.len() / 2;
        filtered = (0..x.len())
            .map(|n| {
                taps.iter()
                    .enumerate()
                    .filter_map(|(k, &t)| {
                        let j = n as isize + mid as isize - k as isize;
                        (j >= 0 && (j as usize) < x.len()).then(|| t * x[j as usize])
                    })
                    .sum()
            })
            .collect::<Vec<f64>>();
        &filtered
    } else {
        x
    };
    (0..out_len)
        .map(|m| {
            let pos = m as f64 * from_hz / to_hz;
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            match (src.get(i), src.get(i + 1)) {
                (Some(&a), Some(&b)) => a + frac * (b - a),
                (Some(&a), None) => a,
                _ => *src.last().unwrap_or(&0.0),
            }
        })
        .collect()
}

/// Resamples to `to_hz`; output length is `round(len * to_hz / from_hz)`.
pub fn resample(x: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>> {
    for r in [from_hz, to_hz] {
        if !(r > 0.0 && r.is_finite()) {
            return Err(DspError::InvalidRate(r));
        }
    }
    if x.is_empty() {
        return Err(DspError::EmptySignal);
    }
    if from_hz == to_hz {
        return Ok(x.to_vec());
    }
    let out_len = (x.len() as f64 * to_hz / from_hz).round() as usize;
    Ok(match rational_ratio(from_hz, to_hz) {
        Some((up, down)) => resample_poly(x, up, down, out_len),
        None => resample_linear(x, from_hz, to_hz, out_len),
    })
}

/// Maximal half-open runs `[start, end)` where `|x| <= threshold_uv`.
pub fn reject_artifacts(x: &[f64], threshold_uv: f64) -> Vec<(usize, usize)> {
    let mut segments = Vec::new();
    let mut start = None;
    for (i, v) in x.iter().enumerate() {
        let clean = v.abs() <= threshold_uv;
        match (clean, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                segments.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        segments.push((s, x.len()));
    }
    segments
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    /// Powerline frequency; `None` skips the notch stage.
    pub notch_hz: Option<f64>,
    pub target_rate_hz: f64,
    pub reject_threshold_uv: f64,
    pub scale_factor: f64,
    pub reject_enabled: bool,
    /// Taps for the source-rate filters; `None` uses [`default_num_taps`].
    pub num_taps: Option<usize>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            band_low_hz: 0.5,
            band_high_hz: 50.0,
            notch_hz: Some(50.0),
            target_rate_hz: 128.0,
            reject_threshold_uv: 100.0,
            scale_factor: 1e4,
            reject_enabled: true,
            num_taps: None,
        }
    }
}

impl PreprocessConfig {
    /// Downstream trials: same filters, no artifact rejection.
    pub fn trials() -> Self {
        Self {
            reject_enabled: false,
            ..Self::default()
        }
    }

    fn scale(&self, uv: f64) -> f64 {
        uv * VOLTS_PER_UV * self.scale_factor
    }
}

/// Band-pass, notch, resample, reject (optional), scale. Input is in
/// microvolts at `from_hz`; each returned segment is at the target rate with
/// every sample strictly inside (-1, 1).
pub fn preprocess_channel(x: &[f64], from_hz: f64, cfg: &PreprocessConfig) -> Result<Vec<Vec<f64>>> {
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(DspError::NonFinite(i));
    }
    if !(cfg.scale_factor > 0.0) {
        return Err(DspError::InvalidBand("scale factor must be positive".into()));
    }
    let num_taps = cfg.num_taps.unwrap_or_else(|| default_num_taps(from_hz));
    let bp = design_fir(
        &FilterSpec::bandpass(cfg.band_low_hz, cfg.band_high_hz, num_taps),
        from_hz,
    )?;
    let mut y = filtfilt(&bp, x)?;
    if let Some(notch_hz) = cfg.notch_hz {
        let notch = design_fir(&FilterSpec::notch(notch_hz, num_taps), from_hz)?;
        y = filtfilt(&notch, &y)?;
    }
    let y = resample(&y, from_hz, cfg.target_rate_hz)?;

    let segments: Vec<&[f64]> = if cfg.reject_enabled {
        reject_artifacts(&y, cfg.reject_threshold_uv)
            .into_iter()
            .map(|(s, e)| &y[s..e])
            .collect()
    } else {
        vec![&y[..]]
    };
    segments
        .into_iter()
        .map(|seg| {
            seg.iter()
                .enumerate()
                .map(|(index, &v)| {
                    let value = cfg.scale(v);
                    if value.abs() < 1.0 {
                        Ok(value)
                    } else {
                        Err(DspError::AmplitudeOutOfRange { index, value })
                    }
                })
                .collect()
        })
        .collect()
}

fn fft_pair() -> &'static (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    static PLANS: OnceLock<(Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>)> = OnceLock::new();
    PLANS.get_or_init(|| {
        let mut planner = FftPlanner::new();
        (
            planner.plan_fft_forward(BP_TOKEN_LEN),
            planner.plan_fft_inverse(BP_TOKEN_LEN),
        )
    })
}

fn in_beta_gamma(bin: usize) -> bool {
    let k = bin.min(BP_TOKEN_LEN - bin);
    (BP_LOW_BIN..=BP_HIGH_BIN).contains(&k)
}

/// Exact zero-phase 13–50 Hz filter for a one-second token: DFT, keep bins
/// 13..=50 (and their mirrors), inverse DFT.
pub fn bandpass_13_50(token: &[f64]) -> Result<Vec<f64>> {
    if token.len() != BP_TOKEN_LEN {
        return Err(DspError::WrongLength(token.len()));
    }
    let (fwd, inv) = fft_pair();
    let mut buf: Vec<Complex64> = token.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fwd.process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        if !in_beta_gamma(k) {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    inv.process(&mut buf);
    Ok(buf.iter().map(|c| c.re / BP_TOKEN_LEN as f64).collect())
}

/// The same 13–50 Hz projection as a dense symmetric 128x128 matrix
/// (row-major), built from the closed-form cosine kernel.
pub fn bandpass_13_50_matrix() -> &'static [f64] {
    static MATRIX: OnceLock<Vec<f64>> = OnceLock::new();
    MATRIX.get_or_init(|| band_matrix(BP_TOKEN_LEN, BP_TOKEN_LEN as f64, BP_LOW_BIN as f64, BP_HIGH_BIN as f64))
}

/// Symmetric `n x n` matrix (row-major) of the ideal circular band-pass that
/// keeps DFT bins whose frequency `k * rate / n` lies in `[low_hz, high_hz]`.
/// Right-multiplying a row vector by it filters that row.
pub fn band_matrix(n: usize, rate_hz: f64, low_hz: f64, high_hz: f64) -> Vec<f64> {
    let bins: Vec<usize> = (0..=n / 2)
        .filter(|&k| {
            let f = k as f64 * rate_hz / n as f64;
            f >= low_hz && f <= high_hz
        })
        .collect();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let lag = i.abs_diff(j).min(n - i.abs_diff(j));
            let sum: f64 = bins
                .iter()
                .map(|&k| {
                    let w = if k == 0 || 2 * k == n { 1.0 } else { 2.0 };
                    w * (2.0 * PI * ((k * lag) % n) as f64 / n as f64).cos()
                })
                .sum();
            m[i * n + j] = sum / n as f64;
        }
    }
    m
}
