//! Raw EEG recordings: the in-memory [`Recording`] type, the on-disk container
//! format and a seeded synthetic generator.
//!
//! A container is a pair of files sharing a stem: `<stem>.sgh` is a UTF-8
//! `key=value` header and `<stem>.sgb` holds little-endian `f32` samples laid
//! out channel-major (all samples of channel 0, then channel 1, ...).

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONTAINER_VERSION: u32 = 1;
pub const HEADER_EXT: &str = "sgh";
pub const PAYLOAD_EXT: &str = "sgb";
const DTYPE_TAG: &str = "f32le";

/// Electrode names handed out by the synthetic generator, in order.
pub const MONTAGE: [&str; 32] = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "FC5", "FC1", "FC2", "FC6", "T7", "C3", "Cz", "C4", "T8", "CP5", "CP1",
    "CP2", "CP6", "P7", "P3", "Pz", "P4", "P8", "PO3", "PO4", "O1", "Oz", "O2", "AF3", "AF4",
];

#[derive(Debug, Error)]
pub enum SignalIoError {
    #[error("malformed header {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("payload {path} has {actual} bytes, header declares {expected}")]
    PayloadSizeMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite sample in channel {channel} at index {index}")]
    NonFiniteSample { channel: String, index: usize },
    #[error("invalid recording: {0}")]
    InvalidRecording(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, SignalIoError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSignal {
    pub name: String,
    pub samples: Vec<f32>,
    /// True once amplitudes have been scaled into (-1, 1).
    pub scaled: bool,
}

impl ChannelSignal {
    pub fn new(name: impl Into<String>, samples: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            samples,
            scaled: false,
        }
    }

    pub fn samples_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&v| v as f64).collect()
    }

    fn check(&self) -> Result<()> {
        if let Some(index) = self.samples.iter().position(|v| !v.is_finite()) {
            return Err(SignalIoError::NonFiniteSample {
                channel: self.name.clone(),
                index,
            });
        }
        if self.scaled {
            if let Some(i) = self.samples.iter().position(|v| v.abs() >= 1.0) {
                return Err(SignalIoError::InvalidRecording(format!(
                    "scaled channel {} has |sample| >= 1 at index {i}",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// One subject/session worth of equally long channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub channels: Vec<ChannelSignal>,
    pub sampling_rate_hz: f64,
}

impl Recording {
    /// Builds a recording and checks its invariants.
    pub fn new(subject_id: impl Into<String>, channels: Vec<ChannelSignal>, sampling_rate_hz: f64) -> Result<Self> {
        let rec = Self {
            subject_id: subject_id.into(),
            channels,
            sampling_rate_hz,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sampling_rate_hz.is_finite() && self.sampling_rate_hz > 0.0) {
            return Err(SignalIoError::InvalidRecording(format!(
                "sampling rate must be positive, got {}",
                self.sampling_rate_hz
            )));
        }
        let mut seen = HashSet::new();
        for ch in &self.channels {
            if ch.name.is_empty() || ch.name.contains([',', '\n', '=']) {
                return Err(SignalIoError::InvalidRecording(format!(
                    "bad channel name {:?}",
                    ch.name
                )));
            }
            if !seen.insert(ch.name.as_str()) {
                return Err(SignalIoError::InvalidRecording(format!(
                    "duplicate channel name {}",
                    ch.name
                )));
            }
            if ch.samples.len() != self.n_samples() {
                return Err(SignalIoError::InvalidRecording(format!(
                    "channel {} has {} samples, expected {}",
                    ch.name,
                    ch.samples.len(),
                    self.n_samples()
                )));
            }
            ch.check()?;
        }
        if self.subject_id.contains('\n') {
            return Err(SignalIoError::InvalidRecording("subject id contains newline".into()));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.channels.first().map_or(0, |c| c.samples.len())
    }

    pub fn channel(&self, name: &str) -> Option<&ChannelSignal> {
        self.channels.iter().find(|c| c.name == name)
    }
}

/// Header and payload paths for a container stem (any extension is replaced).
pub fn container_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension(HEADER_EXT), path.with_extension(PAYLOAD_EXT))
}

pub fn write_container(rec: &Recording, path: &Path) -> Result<()> {
    rec.validate()?;
    let (header_path, payload_path) = container_paths(path);
    let names: Vec<&str> = rec.channels.iter().map(|c| c.name.as_str()).collect();
    let scaled = rec.channels.iter().any(|c| c.scaled);
    let header = format!(
        "version={CONTAINER_VERSION}\nsubject={}\nrate={}\nchannels={}\nsamples={}\ndtype={DTYPE_TAG}\nscaled={}\n",
        rec.subject_id,
        rec.sampling_rate_hz,
        names.join(","),
        rec.n_samples(),
        scaled,
    );
    let mut payload = Vec::with_capacity(rec.channels.len() * rec.n_samples() * 4);
    for ch in &rec.channels {
        for v in &ch.samples {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_file(&payload_path, &payload)?;
    write_file(&header_path, header.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| SignalIoError::IoFailure {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)
}

pub fn read_container(path: &Path) -> Result<Recording> {
    let (header_path, payload_path) = container_paths(path);
    let text = fs::read_to_string(&header_path).map_err(|source| SignalIoError::IoFailure {
        path: header_path.clone(),
        source,
    })?;
    let malformed = |reason: String| SignalIoError::MalformedHeader {
        path: header_path.clone(),
        reason,
    };

    let mut version = None;
    let mut rate = None;
    let mut channels = None;
    let mut samples = None;
    let mut subject = String::new();
    let mut scaled = false;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| malformed(format!("line {} is not key=value", lineno + 1)))?;
        match key.trim() {
            "version" => version = Some(value.trim().to_string()),
            "rate" => {
                rate = Some(
                    value
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| malformed(format!("rate: {e}")))?,
                )
            }
            "channels" => {
                let v = value.trim();
                channels = Some(if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|s| s.trim().to_string()).collect::<Vec<_>>()
                })
            }
            "samples" => {
                samples = Some(
                    value
                        .trim()
                        .parse::<usize>()
                        .map_err(|e| malformed(format!("samples: {e}")))?,
                )
            }
            "dtype" => {
                if value.trim() != DTYPE_TAG {
                    return Err(malformed(format!("unsupported dtype {}", value.trim())));
                }
            }
            "subject" => subject = value.trim().to_string(),
            "scaled" => {
                scaled = value
                    .trim()
                    .parse::<bool>()
                    .map_err(|e| malformed(format!("scaled: {e}")))?
            }
            _ => {}
        }
    }
    match version.as_deref() {
        Some("1") => {}
        Some(v) => return Err(malformed(format!("unsupported version {v}"))),
        None => return Err(malformed("missing key version".into())),
    }
    let rate = rate.ok_or_else(|| malformed("missing key rate".into()))?;
    let names = channels.ok_or_else(|| malformed("missing key channels".into()))?;
    let n = samples.ok_or_else(|| malformed("missing key samples".into()))?;

    let payload = fs::read(&payload_path).map_err(|source| SignalIoError::IoFailure {
        path: payload_path.clone(),
        source,
    })?;
    let expected = names.len() * n * 4;
    if payload.len() != expected {
        return Err(SignalIoError::PayloadSizeMismatch {
            path: payload_path,
            expected,
            actual: payload.len(),
        });
    }
    let channels = names
        .into_iter()
        .enumerate()
        .map(|(c, name)| {
            let bytes = &payload[c * n * 4..(c + 1) * n * 4];
            let samples = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            ChannelSignal { name, samples, scaled }
        })
        .collect();
    let rec = Recording {
        subject_id: subject,
        channels,
        sampling_rate_hz: rate,
    };
    rec.validate().map_err(|e| match e {
        SignalIoError::InvalidRecording(reason) => malformed(reason),
        other => other,
    })?;
    Ok(rec)
}

/// One sinusoidal band in a synthetic recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandComponent {
    pub center_hz: f64,
    pub amplitude_uv: f64,
    /// Amplitude multiplier per class label; empty means 1.0 for every class.
    #[serde(default)]
    pub class_gains: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    pub n_channels: usize,
    pub duration_s: f64,
    pub sampling_rate_hz: f64,
    pub band_components: Vec<BandComponent>,
    pub noise_std_uv: f64,
    #[serde(default)]
    pub seed: u64,
    /// Channels whose component amplitudes follow the class gains; `None` means all.
    #[serde(default)]
    pub informative_channels: Option<Vec<usize>>,
    /// Relative per-subject, per-channel amplitude jitter (uniform in ±jitter).
    #[serde(default)]
    pub subject_jitter: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SignalIoError::InvalidSpec(m));
        if self.n_subjects == 0 || self.n_channels == 0 {
            return bad("need at least one subject and one channel".into());
        }
        if !(self.sampling_rate_hz > 0.0) || !(self.duration_s > 0.0) {
            return bad("rate and duration must be positive".into());
        }
        if !(self.noise_std_uv >= 0.0) || !(0.0..1.0).contains(&self.subject_jitter) {
            return bad("noise std must be >= 0 and jitter in [0, 1)".into());
        }
        for c in &self.band_components {
            if !(c.center_hz > 0.0 && c.center_hz < self.sampling_rate_hz / 2.0) {
                return bad(format!(
                    "component at {} Hz outside (0, {})",
                    c.center_hz,
                    self.sampling_rate_hz / 2.0
                ));
            }
        }
        if let Some(chs) = &self.informative_channels {
            if chs.iter().any(|&c| c >= self.n_channels) {
                return bad("informative channel index out of range".into());
            }
        }
        Ok(())
    }

    pub fn channel_name(&self, c: usize) -> String {
        MONTAGE.get(c).map_or_else(|| format!("E{c}"), |s| s.to_string())
    }
}

/// First subject, first trial of the given class.
pub fn generate_synthetic(spec: &SyntheticSpec, class_label: usize) -> Result<Recording> {
    generate_recording(spec, 0, class_label, 0)
}

/// Recording for `(subject, class_label, trial)`; a pure function of its inputs.
pub fn generate_recording(spec: &SyntheticSpec, subject: usize, class_label: usize, trial: usize) -> Result<Recording> {
    spec.validate()?;
    if subject >= spec.n_subjects {
        return Err(SignalIoError::InvalidSpec(format!(
            "subject {subject} >= n_subjects {}",
            spec.n_subjects
        )));
    }
    let gains: Vec<f64> = spec
        .band_components
        .iter()
        .map(|c| {
            if c.class_gains.is_empty() {
                Ok(1.0)
            } else {
                c.class_gains
                    .get(class_label)
                    .copied()
                    .ok_or_else(|| SignalIoError::InvalidSpec(format!("no gain for class {class_label}")))
            }
        })
        .collect::<Result<_>>()?;

    // Subject-level jitter must not depend on class or trial.
    let mut subject_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    subject_rng.set_stream(0x5u64 << 56 | subject as u64);
    let jitter: Vec<Vec<f64>> = (0..spec.n_channels)
        .map(|_| {
            spec.band_components
                .iter()
                .map(|_| {
                    if spec.subject_jitter > 0.0 {
                        1.0 + subject_rng.random_range(-spec.subject_jitter..spec.subject_jitter)
                    } else {
                        1.0
                    }
                })
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(((subject as u64) << 40) ^ ((class_label as u64) << 32) ^ trial as u64);
    let n = (spec.duration_s * spec.sampling_rate_hz).round() as usize;
    let noise = Normal::new(0.0, spec.noise_std_uv).map_err(|e| SignalIoError::InvalidSpec(e.to_string()))?;

    let channels = (0..spec.n_channels)
        .map(|c| {
            let informative = spec.informative_channels.as_ref().is_none_or(|chs| chs.contains(&c));
            let phases: Vec<f64> = spec
                .band_components
                .iter()
                .map(|_| rng.random_range(0.0..2.0 * PI))
                .collect();
            let samples = (0..n)
                .map(|t| {
                    let time = t as f64 / spec.sampling_rate_hz;
                    let mut v = 0.0;
                    for (k, comp) in spec.band_components.iter().enumerate() {
                        let gain = if informative { gains[k] } else { 1.0 };
                        v += comp.amplitude_uv
                            * gain
                            * jitter[c][k]
                            * (2.0 * PI * comp.center_hz * time + phases[k]).sin();
                    }
                    if spec.noise_std_uv > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    v as f32
                })
                .collect();
            ChannelSignal::new(spec.channel_name(c), samples)
        })
        .collect();
    Recording::new(format!("S{subject:03}"), channels, spec.sampling_rate_hz)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_component(noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            n_subjects: 2,
            n_channels: 2,
            duration_s: 2.0,
            sampling_rate_hz: 128.0,
            band_components: vec![BandComponent {
                center_hz: 10.0,
                amplitude_uv: 20.0,
                class_gains: vec![],
            }],
            noise_std_uv: noise,
            seed: 7,
            informative_channels: None,
            subject_jitter: 0.0,
        }
    }

    #[test]
    fn two_by_256_payload_is_2048_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recording::new(
            "s1",
            vec![
                ChannelSignal::new("C3", vec![0.25; 256]),
                ChannelSignal::new("C4", vec![-0.5; 256]),
            ],
            256.0,
        )
        .unwrap();
        let stem = dir.path().join("rec");
        write_container(&rec, &stem).unwrap();
        assert_eq!(fs::metadata(stem.with_extension("sgb")).unwrap().len(), 2048);
        let back = read_container(&stem).unwrap();
        assert_eq!(back.channels.len(), 2);
        assert_eq!(back.n_samples(), 256);
        assert_eq!(back, rec);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recording::new(
            "s1",
            vec![
                ChannelSignal::new("a", vec![1.0; 256]),
                ChannelSignal::new("b", vec![1.0; 256]),
            ],
            256.0,
        )
        .unwrap();
        let stem = dir.path().join("rec");
        write_container(&rec, &stem).unwrap();
        let payload = stem.with_extension("sgb");
        let mut bytes = fs::read(&payload).unwrap();
        bytes.pop();
        fs::write(&payload, bytes).unwrap();
        match read_container(&stem) {
            Err(SignalIoError::PayloadSizeMismatch { expected, actual, .. }) => {
                assert_eq!((expected, actual), (2048, 2047))
            }
            other => panic!("expected size mismatch, got {other:?}"),
        }
    }

    #[test]
    fn payload_bytes_are_little_endian_f32() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recording::new("s", vec![ChannelSignal::new("Cz", vec![0.5, -0.25])], 128.0).unwrap();
        let stem = dir.path().join("x");
        write_container(&rec, &stem).unwrap();
        let bytes = fs::read(stem.with_extension("sgb")).unwrap();
        // 0.5 = 0x3F000000, -0.25 = 0xBE800000
        assert_eq!(bytes, vec![0x00, 0x00, 0x00, 0x3F, 0x00, 0x00, 0x80, 0xBE]);
    }

    #[test]
    fn empty_recording_has_zero_samples() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recording::new("s", vec![ChannelSignal::new("Cz", vec![])], 128.0).unwrap();
        let stem = dir.path().join("e");
        write_container(&rec, &stem).unwrap();
        let header = fs::read_to_string(stem.with_extension("sgh")).unwrap();
        assert!(header.lines().any(|l| l == "samples=0"));
        assert_eq!(fs::metadata(stem.with_extension("sgb")).unwrap().len(), 0);
        assert_eq!(read_container(&stem).unwrap(), rec);
    }

    #[test]
    fn non_finite_samples_refused() {
        let rec = Recording {
            subject_id: "s".into(),
            channels: vec![ChannelSignal::new("Cz", vec![0.0, f32::NAN])],
            sampling_rate_hz: 128.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("bad");
        assert!(matches!(
            write_container(&rec, &stem),
            Err(SignalIoError::NonFiniteSample { index: 1, .. })
        ));
        assert!(!stem.with_extension("sgh").exists());
    }

    #[test]
    fn missing_header_key_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        fs::write(stem.with_extension("sgh"), "version=1\nrate=128\nsamples=0\n").unwrap();
        fs::write(stem.with_extension("sgb"), b"").unwrap();
        let err = read_container(&stem).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
    }

    #[test]
    fn noiseless_component_is_a_pure_sinusoid() {
        let rec = generate_synthetic(&one_component(0.0), 0).unwrap();
        for ch in &rec.channels {
            // Project onto 10 Hz sin/cos over an integer number of periods.
            let n = ch.samples.len() as f64;
            let (mut s, mut c) = (0.0, 0.0);
            for (t, &v) in ch.samples.iter().enumerate() {
                let ph = 2.0 * PI * 10.0 * t as f64 / 128.0;
                s += v as f64 * ph.sin();
                c += v as f64 * ph.cos();
            }
            let amp = 2.0 * (s * s + c * c).sqrt() / n;
            assert!((amp - 20.0).abs() < 1e-4, "amplitude {amp}");
            let peak = ch.samples.iter().fold(0f32, |m, v| m.max(v.abs()));
            assert!(peak <= 20.0 + 1e-4);
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = one_component(3.0);
        assert_eq!(
            generate_synthetic(&spec, 0).unwrap(),
            generate_synthetic(&spec, 0).unwrap()
        );
        assert_ne!(
            generate_recording(&spec, 0, 0, 0).unwrap(),
            generate_recording(&spec, 0, 0, 1).unwrap()
        );
    }

    #[test]
    fn ten_hz_peak_dominates_25_hz_bin() {
        let rec = generate_synthetic(&one_component(1.0), 0).unwrap();
        let x = rec.channels[0].samples_f64();
        let power = |f: f64| {
            let (mut s, mut c) = (0.0, 0.0);
            for (t, v) in x.iter().enumerate() {
                let ph = 2.0 * PI * f * t as f64 / 128.0;
                s += v * ph.sin();
                c += v * ph.cos();
            }
            s * s + c * c
        };
        let db = 10.0 * (power(10.0) / power(25.0)).log10();
        assert!(db >= 20.0, "{db} dB");
    }

    #[test]
    fn component_above_nyquist_rejected() {
        let mut spec = one_component(0.0);
        spec.band_components[0].center_hz = 64.0;
        assert!(matches!(
            generate_synthetic(&spec, 0),
            Err(SignalIoError::InvalidSpec(_))
        ));
    }
}
