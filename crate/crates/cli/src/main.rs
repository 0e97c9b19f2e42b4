use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use singlem_cli::{
    cmd_evaluate, cmd_extract, cmd_preprocess, cmd_pretrain, cmd_synth, parse_fourier, CliError, Overrides,
    PretrainOptions, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "singlem",
    version,
    about = "Single-channel EEG encoder: preprocessing, pretraining, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; must set `seed`.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Powerline notch frequency.
    #[arg(long, value_parser = ["50", "60"])]
    notch: Option<String>,
    /// Overrides the encoder's maximum sequence length.
    #[arg(long)]
    max_seq_len: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic recordings and labels.csv.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Filter, resample, reject and scale raw containers.
    Preprocess {
        /// Container file or directory.
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Masked-reconstruction pretraining on a container corpus.
    Pretrain {
        corpus: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps, leaving a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Frozen-feature extraction for a trials directory.
    Extract {
        trials: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Fourier baseline instead of the encoder, as `k=N`.
        #[arg(long)]
        fourier: Option<String>,
    },
    /// Leave-one-subject-out evaluation of a features CSV or trials directory.
    Evaluate {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        fourier: Option<String>,
        /// Also score each channel on its own.
        #[arg(long)]
        per_channel: bool,
    },
}

fn config(common: &Common, fourier: Option<&str>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    Overrides {
        seed: common.seed,
        notch_hz: common.notch.as_deref().map(|n| n.parse().expect("validated by clap")),
        max_seq_len: common.max_seq_len,
        fourier_k: fourier.map(parse_fourier).transpose()?,
    }
    .apply(&mut cfg);
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { common } => {
            cmd_synth(&config(&common, None)?, &common.out)?;
        }
        Command::Preprocess { input, common } => {
            cmd_preprocess(&config(&common, None)?, &input, &common.out)?;
        }
        Command::Pretrain {
            corpus,
            common,
            resume,
            stop_after,
        } => {
            let t = cmd_pretrain(
                &config(&common, None)?,
                &corpus,
                &common.out,
                &PretrainOptions { resume, stop_after },
            )?;
            if let Some(last) = t.history().last() {
                eprintln!(
                    "step {} of {}: loss {:.6}",
                    t.step_index(),
                    t.total_steps,
                    last.parts.total
                );
            }
        }
        Command::Extract {
            trials,
            common,
            checkpoint,
            fourier,
        } => {
            let cfg = config(&common, fourier.as_deref())?;
            cmd_extract(&cfg, &trials, checkpoint.as_deref(), &common.out)?;
        }
        Command::Evaluate {
            input,
            common,
            checkpoint,
            fourier,
            per_channel,
        } => {
            let cfg = config(&common, fourier.as_deref())?;
            let report = cmd_evaluate(&cfg, &input, checkpoint.as_deref(), &common.out, per_channel)?;
            print!("{}", report.summary("result"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
