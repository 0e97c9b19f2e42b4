#![allow(dead_code)]

use std::path::Path;

use singlem_cli::RunConfig;

/// Run config for small end-to-end runs. `channels` synthetic channels,
/// classes differing in 10 Hz vs 25 Hz power.
pub fn config_text(
    seed: u64,
    subjects: usize,
    channels: usize,
    classes: usize,
    trials: usize,
    duration_s: f64,
) -> String {
    format!(
        r#"
seed = {seed}

[encoder]
preset = "tiny"

[pretrain]
batch_size = 2
steps = 10
seq_len_min = 2
seq_len_max = 4
lr_max = 1e-3
lr_min = 1e-5

[evaluate]
c_grid = [0.1, 10.0]
gamma_grid = [0.01, 0.1]

[synth]
n_classes = {classes}
trials_per_class = {trials}

[synth.spec]
n_subjects = {subjects}
n_channels = {channels}
duration_s = {duration_s}
sampling_rate_hz = 256.0
noise_std_uv = 2.0
subject_jitter = 0.1

[[synth.spec.band_components]]
center_hz = 10.0
amplitude_uv = 15.0
class_gains = [2.0, 0.5]

[[synth.spec.band_components]]
center_hz = 25.0
amplitude_uv = 15.0
class_gains = [0.5, 2.0]
"#
    )
}

pub fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

pub fn config(
    seed: u64,
    subjects: usize,
    channels: usize,
    classes: usize,
    trials: usize,
    duration_s: f64,
) -> RunConfig {
    RunConfig::parse(&config_text(seed, subjects, channels, classes, trials, duration_s)).unwrap()
}
