//! Command-line pipelines, run directories, reports and plots.

mod commands;
pub mod config;
pub mod experiments;
pub mod report;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::envdata::DataError;
use crate::etm::EtmError;
use crate::manifold::ManifoldError;
use crate::pessimism::PessimismError;
use crate::policy::PolicyError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("correlation undefined: an input has zero variance")]
    UndefinedCorrelation,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Etm(#[from] EtmError),
    #[error(transparent)]
    Pessimism(#[from] PessimismError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, CliError>;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "mcetm", about = "Energy-based transition models for offline model-based RL", arg_required_else_help = true)]
struct Cli {
    /// Output directory; receives config.resolved, CSV, SVG and checkpoints/.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Io {
    /// Dataset CSV.
    #[arg(long)]
    data: Option<String>,
    /// Energy model checkpoint.
    #[arg(long)]
    model: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate an offline dataset.
    GenData {
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Train the next-state autoencoder.
    TrainAe {
        #[arg(long)]
        data: Option<String>,
    },
    /// Train an energy model ensemble.
    TrainEtm {
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        ae: Option<String>,
    },
    /// Predict next states for a dataset.
    Infer(Io),
    /// Cross matrix of mean prediction errors.
    EvalDynamics {
        /// NAME=PATH, repeatable.
        #[arg(long = "model")]
        models: Vec<String>,
        /// NAME=PATH, repeatable.
        #[arg(long = "data")]
        datasets: Vec<String>,
    },
    /// Correlate final energy with prediction error on ID and OOD sets.
    EnergyCorr {
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        ood: Option<String>,
    },
    /// Train a policy with energy-gated model rollouts.
    TrainPolicy(Io),
    /// Check the performance bound on random tabular MDPs.
    VerifyBound {
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Full method against its three ablations.
    Ablate {
        /// Select lambda from 0.5..2.5 first.
        #[arg(long)]
        sweep: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainAe { .. } => "train-ae",
            Command::TrainEtm { .. } => "train-etm",
            Command::Infer(_) => "infer",
            Command::EvalDynamics { .. } => "eval-dynamics",
            Command::EnergyCorr { .. } => "energy-corr",
            Command::TrainPolicy(_) => "train-policy",
            Command::VerifyBound { .. } => "verify-bound",
            Command::Ablate { .. } => "ablate",
        }
    }

    /// Flag values as config overrides.
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        match self {
            Command::GenData { env, n, sigma } => {
                put("data.env", env.clone());
                put("data.n", n.map(|v| v.to_string()));
                put("data.sigma", sigma.map(|v| v.to_string()));
            }
            Command::TrainAe { data } => put("io.data", data.clone()),
            Command::TrainEtm { data, ae } => {
                put("io.data", data.clone());
                put("io.ae", ae.clone());
            }
            Command::Infer(io) | Command::TrainPolicy(io) => {
                put("io.data", io.data.clone());
                put("io.model", io.model.clone());
            }
            Command::EvalDynamics { models, datasets } => {
                put("io.models", (!models.is_empty()).then(|| models.join(",")));
                put("io.datasets", (!datasets.is_empty()).then(|| datasets.join(",")));
            }
            Command::EnergyCorr { model, id, ood } => {
                put("io.model", model.clone());
                put("io.id", id.clone());
                put("io.ood", ood.clone());
            }
            Command::VerifyBound { instances } => put("bound.instances", instances.map(|v| v.to_string())),
            Command::Ablate { sweep } => put("ablate.sweep", sweep.then(|| "true".to_string())),
        }
        out
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for pair in &cli.overrides {
        cfg.set_pair(pair)?;
    }
    for (k, v) in cli.command.overrides() {
        cfg.set(k, &v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

/// Parses `argv` (program name first), runs one subcommand and returns the
/// process exit code: 0 ok, 1 runtime failure, 2 usage.
pub fn run(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = resolve(&cli).and_then(|cfg| commands::execute(cli.command.name(), &cfg, &cli.run_dir));
    match result {
        Ok(()) => 0,
        Err(e @ CliError::Usage(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
