//! `flownull`: simulate data, train the conditional flow, sample posteriors
//! and evaluate them.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use flownull::train::Preset;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Mixed(String),
    #[error(transparent)]
    Core(#[from] flownull::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Input(_) => "input",
            CliError::Mixed(_) => "mixed_config",
            CliError::Core(e) => match e {
                flownull::Error::Diverged { .. } => "diverged",
                flownull::Error::Mismatch(_) => "mismatch",
                flownull::Error::Format(_) => "format",
                _ => "core",
            },
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        }
    }
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (JSON); defaults to the preset's configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, value_enum, global = true)]
    preset: Option<PresetArg>,
}

#[derive(Debug, Parser)]
#[command(name = "flownull", version, about = "Conditional-flow posterior sampling for undersampled MRI")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Print the effective configuration.
    Config,
    /// Simulate a dataset.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the conditioning network.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint maximum-likelihood training.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from this (pretrained) checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue the run stored in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Draw posterior samples for dataset measurements.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only this sample index (default: all).
        #[arg(long)]
        index: Option<usize>,
        /// Disable data consistency (raw generator output).
        #[arg(long)]
        raw: bool,
    },
    /// MAP estimation over the unmeasured k-space.
    Map {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        index: Option<usize>,
        /// Start from zeros instead of a posterior sample.
        #[arg(long)]
        zero_init: bool,
    },
    /// Score estimates against the dataset ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Directory with one sub-directory per sample.
        #[arg(long)]
        estimates: PathBuf,
        /// File inside each sample directory to score.
        #[arg(long, default_value = "mean.fnt")]
        file: String,
        #[arg(long)]
        out: PathBuf,
        /// Accept inputs produced under different configurations.
        #[arg(long)]
        allow_mixed: bool,
    },
    /// Gain of P-sample averaging against the theoretical law.
    Gaincurve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    let cfg = commands::effective_config(
        cli.common.config.as_deref(),
        cli.common.preset.map(Into::into),
        cli.common.seed,
    )?;
    let force = cli.common.force;
    match cli.cmd {
        Cmd::Config => {
            print!("{}", cfg.canonical());
            Ok(json!({ "config_hash": cfg.hash() }))
        }
        Cmd::Simulate { out } => commands::simulate(&cfg, &out, force),
        Cmd::Pretrain { data, out } => commands::pretrain(&cfg, &data, &out, force),
        Cmd::Train {
            data,
            out,
            init,
            resume,
        } => commands::train(&cfg, &data, &out, init.as_deref(), resume, force),
        Cmd::Sample {
            checkpoint,
            data,
            out,
            index,
            raw,
        } => commands::sample(&cfg, &checkpoint, &data, &out, index, raw, force),
        Cmd::Map {
            checkpoint,
            data,
            out,
            index,
            zero_init,
        } => commands::map(&cfg, &checkpoint, &data, &out, index, zero_init, force),
        Cmd::Eval {
            data,
            estimates,
            file,
            out,
            allow_mixed,
        } => commands::eval(&data, &estimates, &file, &out, allow_mixed, force),
        Cmd::Gaincurve {
            checkpoint,
            data,
            out,
        } => commands::gaincurve(&cfg, &checkpoint, &data, &out, force),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = matches!(cli.cmd, Cmd::Config);
    match run(cli) {
        Ok(summary) => {
            if !quiet {
                println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let body = json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
