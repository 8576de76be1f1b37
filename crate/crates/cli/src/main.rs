//! Command-line entry point for running one experiment.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gfml::orchestrator::{run_experiment, ExperimentConfig, Strategy};
use gfml::Error;
use log::info;

#[derive(Parser)]
#[command(name = "gfml", version, about = "Coalition-based federated meta-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its outputs.
    Run {
        /// key=value config file; omitted keys take their defaults.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        misbehavior_ratio: Option<f64>,
        #[arg(long)]
        no_ledger: bool,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::ConfigInvalid(_) => EXIT_CONFIG,
        Error::Infeasible(_) | Error::NonConvergence(_) | Error::EmptyCoalition => EXIT_INFEASIBLE,
        _ => 1,
    }
}

fn load_config(
    path: &Path,
    strategy: Option<String>,
    seed: Option<u64>,
    rounds: Option<usize>,
    misbehavior_ratio: Option<f64>,
    no_ledger: bool,
) -> Result<ExperimentConfig, Error> {
    let mut config = ExperimentConfig::load(path).map_err(|e| match e {
        Error::Io { .. } => Error::ConfigInvalid(e.to_string()),
        other => other,
    })?;
    if let Some(id) = strategy {
        config.strategy = Strategy::parse(&id)?;
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(rounds) = rounds {
        config.rounds = rounds;
    }
    if let Some(ratio) = misbehavior_ratio {
        config.misbehavior_ratio = ratio;
    }
    if no_ledger {
        config.ledger_on = false;
    }
    config.validate()?;
    Ok(config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let Command::Run {
        config,
        strategy,
        seed,
        rounds,
        misbehavior_ratio,
        no_ledger,
        out,
    } = Cli::parse().command;

    let result = load_config(&config, strategy, seed, rounds, misbehavior_ratio, no_ledger).and_then(|config| {
        let output = run_experiment(&config)?;
        output.write(&out)?;
        info!(
            "{}: personalized accuracy {:.4}, mean latency {:.3} s, outputs in {}",
            output.summary.strategy,
            output.summary.mean_personalized_accuracy,
            output.summary.mean_round_latency,
            out.display()
        );
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
