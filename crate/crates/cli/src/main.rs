//! `tsgbt`: heterogeneous treatment effect estimation with two-stage
//! gradient boosted trees.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use commands::CommonArgs;
use config::Mode;

#[derive(Parser)]
#[command(
    name = "tsgbt",
    about = "Heterogeneous treatment effect estimation for randomized trials",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Worker threads (overrides TSGBT_THREADS; default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Master RNG seed (overrides the config's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Dataset CSV (overrides the config's data path).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write model/effect/diagnostic/importance artifacts.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// tsgbt (two-stage), wgbt (no augmentation), or sgbt (per arm).
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Predict per-row effects with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
    },
    /// Conditional permutation test for global effect heterogeneity.
    Permtest {
        #[arg(long)]
        config: PathBuf,
        /// Reuse a saved two-stage model instead of fitting from scratch.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Generate a simulated trial dataset.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare fitting strategies on simulated designs.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();

    let threads = match cli.threads {
        Some(n) => Some(n),
        None => match std::env::var("TSGBT_THREADS") {
            Ok(v) => Some(
                v.parse::<usize>()
                    .with_context(|| format!("TSGBT_THREADS='{v}' is not a thread count"))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("initializing the thread pool")?;
    }

    let args = CommonArgs {
        data: cli.data,
        out: cli.out,
        seed: cli.seed,
    };
    match &cli.command {
        Command::Fit { config, mode } => commands::cmd_fit(config, &args, *mode),
        Command::Predict { model } => {
            let data = args
                .data
                .as_deref()
                .context("predict needs --data <csv>")?;
            commands::cmd_predict(model, data, &args.out)
        }
        Command::Permtest { config, model } => {
            commands::cmd_permtest(config, &args, model.as_deref())
        }
        Command::Simulate { config } => commands::cmd_simulate(config, &args),
        Command::Benchmark { config } => commands::cmd_benchmark(config, &args),
    }
}
