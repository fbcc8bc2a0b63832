mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "mdunet",
    version,
    about = "Multi-decoder U-Net: synthesize data, train, predict and score uncertainty maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; omitted fields fall back to defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dataset directory (overrides the config file).
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// Output directory (overrides the config file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed for training and synthesis (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Total training epochs (overrides the config file).
    #[arg(long, global = true)]
    epochs: Option<usize>,

    /// Epoch at which the cross loss opens (overrides the config file).
    #[arg(long, global = true)]
    cross_enable_epoch: Option<usize>,

    /// Cross-entropy weight alpha (overrides the config file).
    #[arg(long, global = true)]
    alpha: Option<f64>,

    /// Comma-separated beta coefficients (overrides the config file).
    #[arg(long, global = true, value_delimiter = ',')]
    betas: Option<Vec<f64>>,

    /// Train N hyperparameter-ensemble runs instead of a single model.
    #[arg(long, global = true)]
    ensemble: Option<usize>,

    /// Print the fully resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-annotator dataset.
    Synth,
    /// Normalize intensities and pad cases to the model grid.
    Preprocess,
    /// Train a model (or an ensemble) and write logs and checkpoints.
    Train,
    /// Score predictions from the trained model against averaged raters.
    Evaluate,
    /// Write per-case soft prediction maps.
    Predict,
    /// Summary tables and difference heatmaps for saved predictions.
    Report,
}

/// Process failure with the documented exit code.
pub enum CliError {
    /// exit 2
    Config(String),
    /// exit 3
    Data(String),
    /// exit 4
    Divergence(String),
    /// exit 1
    Other(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Divergence(_) => "divergence",
            CliError::Other(_) => "other",
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m)
            | CliError::Data(m)
            | CliError::Divergence(m)
            | CliError::Other(m) => m,
        }
    }
}

impl From<mdunet::Error> for CliError {
    fn from(e: mdunet::Error) -> Self {
        use mdunet::Error::*;
        match e {
            InvalidConfig(_) => CliError::Config(e.to_string()),
            Json { .. } => CliError::Config(e.to_string()),
            Io { .. } | Dataset { .. } => CliError::Data(e.to_string()),
            Diverged { .. } => CliError::Divergence(e.to_string()),
            ShapeMismatch { .. } | Numeric(_) => CliError::Other(e.to_string()),
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_ref()).map_err(CliError::Config)?;
    cfg.apply(&Overrides {
        data: cli.data.clone(),
        out: cli.out.clone(),
        seed: cli.seed,
        epochs: cli.epochs,
        cross_enable_epoch: cli.cross_enable_epoch,
        alpha: cli.alpha,
        betas: cli.betas.clone(),
        ensemble: cli.ensemble,
    });
    cfg.validate().map_err(CliError::Config)?;

    if cli.print_config {
        println!("{}", cfg.to_pretty_json());
        return Ok(());
    }

    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Preprocess => commands::preprocess(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Predict => commands::predict(&cfg),
        Command::Report => commands::report(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "error code={} kind={} msg={:?}",
                e.code(),
                e.kind(),
                e.message()
            );
            ExitCode::from(e.code())
        }
    }
}
