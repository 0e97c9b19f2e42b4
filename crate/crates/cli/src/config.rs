//! TOML run configuration. Every command reads the same file and picks the
//! sections it needs; command-line flags override individual fields.

use serde::{Deserialize, Serialize};
use singlem::downstream::{ClassifierKind, EvalConfig, Grid};
use singlem::dsp::PreprocessConfig;
use singlem::encoder::EncoderConfig;
use singlem::pretrain::PretrainConfig;
use singlem::signal_io::SyntheticSpec;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Required. Drives every random choice of every command.
    pub seed: u64,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub extract: ExtractConfig,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub trials_per_class: usize,
    /// Generator parameters; its `seed` is replaced by the run seed.
    pub spec: SyntheticSpec,
}

/// A named preset with optional overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub preset: String,
    pub max_seq_len: Option<usize>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            preset: "full".into(),
            max_seq_len: None,
        }
    }
}

impl EncoderSection {
    pub fn resolve(&self) -> Result<EncoderConfig, CliError> {
        let mut cfg = EncoderConfig::preset(&self.preset)
            .ok_or_else(|| CliError::Config(format!("unknown encoder preset {:?}", self.preset)))?;
        if let Some(n) = self.max_seq_len {
            cfg.max_seq_len = n;
        }
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    /// Seconds dropped from each end of a raw trial after filtering.
    pub pad_s: f64,
    /// Fourier coefficients per second; `None` uses the encoder.
    pub fourier_k: Option<usize>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            pad_s: 0.0,
            fourier_k: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelName {
    Rbf,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub kernel: KernelName,
    pub val_fraction: f64,
    pub c_grid: Option<Vec<f64>>,
    pub gamma_grid: Option<Vec<f64>>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            kernel: KernelName::Rbf,
            val_fraction: 0.2,
            c_grid: None,
            gamma_grid: None,
        }
    }
}

impl EvaluateSection {
    pub fn to_eval_config(&self, seed: u64) -> Result<EvalConfig, CliError> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(CliError::Config("evaluate.val_fraction must lie in (0, 1)".into()));
        }
        let default = Grid::default();
        Ok(EvalConfig {
            grid: Grid {
                cs: self.c_grid.clone().unwrap_or(default.cs),
                gammas: self.gamma_grid.clone().unwrap_or(default.gammas),
            },
            kind: match self.kernel {
                KernelName::Rbf => ClassifierKind::Rbf,
                KernelName::Linear => ClassifierKind::Linear,
            },
            val_fraction: self.val_fraction,
            seed,
        })
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.pretrain.seed = cfg.seed;
        if let Some(s) = cfg.synth.as_mut() {
            s.spec.seed = cfg.seed;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `--seed`, keeping the derived seeds in step.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pretrain.seed = seed;
        if let Some(s) = self.synth.as_mut() {
            s.spec.seed = seed;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory_and_named() {
        let err = RunConfig::parse("[pretrain]\nbatch_size = 4\n").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn run_seed_propagates() {
        let cfg = RunConfig::parse("seed = 9\n[pretrain]\nseed = 1\n").unwrap();
        assert_eq!(cfg.pretrain.seed, 9);
        assert_eq!(cfg.encoder.resolve().unwrap(), EncoderConfig::full());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("seed = 1\nbogus = 2\n").is_err());
        assert!(RunConfig::parse("seed = 1\n[encoder]\npreset = \"nope\"\n")
            .unwrap()
            .encoder
            .resolve()
            .is_err());
    }
}
