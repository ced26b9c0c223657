//! `fedrec`: deterministic federated-recommendation poisoning experiments.

mod config;
mod ops;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

const BUILD_ID: &str = env!("FEDREC_BUILD_ID");

#[derive(Parser)]
#[command(
    name = "fedrec",
    version,
    about = "Simulate poisoning attacks and robust aggregation in federated recommendation"
)]
struct Cli {
    /// Worker threads for parallel sections (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for result files.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Override the config seed (and sweep seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One training run from a config file.
    Train { config: PathBuf },
    /// The full attack x defense x ratio grid from a config file.
    Sweep { config: PathBuf },
    /// Two-phase detection protocol: collect, train, filter.
    Detect { config: PathBuf },
    /// Hardness-profile and PCA emitters.
    Analyze { config: PathBuf },
    /// Brute-force oracle self-checks.
    Oracle,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| anyhow::anyhow!("cannot configure {threads} threads: {e}"))?;
    }
    let code = match &cli.command {
        Command::Train { config } => {
            let spec = load_spec(config, cli.seed)?;
            ops::cmd_train(&spec, &cli.out_dir, BUILD_ID)?;
            0
        }
        Command::Sweep { config } => {
            let spec = load_spec(config, cli.seed)?;
            ops::cmd_sweep(&spec, &cli.out_dir, BUILD_ID)? as u8
        }
        Command::Detect { config } => {
            let spec = load_spec(config, cli.seed)?;
            ops::cmd_detect(&spec, &cli.out_dir, BUILD_ID)?;
            0
        }
        Command::Analyze { config } => {
            let spec = load_spec(config, cli.seed)?;
            ops::cmd_analyze(&spec, &cli.out_dir, BUILD_ID)?;
            0
        }
        Command::Oracle => ops::cmd_oracle(cli.seed.unwrap_or(0))? as u8,
    };
    Ok(code)
}

fn load_spec(path: &PathBuf, seed_override: Option<u64>) -> Result<config::ExperimentSpec> {
    let mut spec = config::parse_config(path)?;
    if let Some(seed) = seed_override {
        spec.base.seed = seed;
        spec.seeds = vec![seed];
    }
    Ok(spec)
}
