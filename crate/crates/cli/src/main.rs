//! Experiment runner for the dual-phase slot-matching workbench.
//!
//! Subcommands: `train`, `eval`, `gradlab`, `sweep`, `purity`. All
//! randomness flows from the config seed; no wall-clock or environment
//! entropy reaches any computation, so reruns produce byte-identical
//! metric files.
//!
//! Exit codes: 0 ok, 1 check failure, 2 usage/config error, 3 numeric
//! failure.

mod cli_error;
mod commands;
mod config;
mod model_io;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cli_error::CliError;
use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "compose-lab", version, about = "Dual-phase slot-matching workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (TOML). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluation worker threads (fallback: COMPOSE_LAB_WORKERS, then 1).
    #[arg(long)]
    workers: Option<usize>,
    /// Episode-count override for evaluation commands.
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run Phase-I continual training and save the model.
    Train(CommonArgs),
    /// Evaluate a trained model on the train/sys/noc splits.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Trained model file (defaults to <out>/model.bin).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run the gradient-geometry and decorrelation check battery.
    Gradlab {
        #[command(flatten)]
        common: CommonArgs,
        /// Corrupt the named check to exercise the failure path.
        #[arg(long)]
        sabotage: Option<String>,
    },
    /// Evaluate across a list of values for one parameter.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// One of: lambda_d, gamma_blend, shots, matcher_kind, beta, epsilon.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Slot purity of the frozen attention stage.
    Purity {
        #[command(flatten)]
        common: CommonArgs,
        /// Images per split.
        #[arg(long, default_value_t = 60)]
        images: usize,
    },
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::from_path(path).map_err(CliError::Usage)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate().map_err(CliError::Usage)?;
    Ok(config)
}

fn out_dir(args: &CommonArgs, config: &ExperimentConfig) -> PathBuf {
    args.out.clone().unwrap_or_else(|| PathBuf::from(&config.out_dir))
}

fn workers(args: &CommonArgs) -> usize {
    args.workers
        .or_else(|| {
            std::env::var("COMPOSE_LAB_WORKERS").ok().and_then(|v| v.parse::<usize>().ok())
        })
        .unwrap_or(1)
        .max(1)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(common) => {
            let config = load_config(&common)?;
            commands::train::run(&config, &out_dir(&common, &config))
        }
        Command::Eval { common, model } => {
            let config = load_config(&common)?;
            let dir = out_dir(&common, &config);
            let model_path = model.unwrap_or_else(|| dir.join("model.bin"));
            commands::eval::run(&config, &dir, &model_path, workers(&common), common.episodes)
        }
        Command::Gradlab { common, sabotage } => {
            let config = load_config(&common)?;
            commands::gradlab::run(&config, &out_dir(&common, &config), sabotage.as_deref())
        }
        Command::Sweep { common, param, values } => {
            let config = load_config(&common)?;
            commands::sweep::run(
                &config,
                &out_dir(&common, &config),
                &param,
                &values,
                workers(&common),
                common.episodes,
            )
        }
        Command::Purity { common, images } => {
            let config = load_config(&common)?;
            commands::purity::run(&config, &out_dir(&common, &config), images)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}
