//! `saal`: config-driven experiments for self-auxiliary multi-task learning.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ExperimentConfig;

/// An error paired with the process exit status it maps to.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

#[derive(Parser)]
#[command(
    name = "saal",
    version,
    about = "Self-auxiliary asymmetric multi-task learning experiments"
)]
struct Cli {
    /// Maximum concurrent training jobs.
    #[arg(long, global = true, env = "SAAL_JOBS")]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path override, e.g. `--set trainer.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured strategy for every seed and write reports.
    Run(ConfigArgs),
    /// Estimate task relationships.
    Relationships {
        #[command(flatten)]
        args: ConfigArgs,
        /// One of: enum, lookahead, gradangle, feature.
        #[arg(long)]
        method: String,
        /// Output directory for matrices, heatmaps and correlations.
        #[arg(long)]
        out: PathBuf,
        /// Matrix file to correlate the new matrices against.
        #[arg(long)]
        against: Option<PathBuf>,
    },
    /// Time training batches of each strategy relative to equal weighting.
    Bench {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        /// Comma-separated strategy names.
        #[arg(long, default_value = "equal,uncertainty,dwa,pcgrad,saal_e,saal_w,saal_ew")]
        strategies: String,
    },
    /// Train equal weighting and saal_e at every shared depth.
    SweepSharedDepth(ConfigArgs),
    /// Print a JSON artefact as a text table.
    Report {
        /// Artefact written by another command.
        input: PathBuf,
    },
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(&args.config, &args.overrides, args.seed).map_err(|error| Failure { code: 2, error })
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run(args) => commands::run(&load(&args)?),
        Command::Relationships {
            args,
            method,
            out,
            against,
        } => commands::relationships(&load(&args)?, &method, &out, against.as_deref()),
        Command::Bench {
            args,
            warmup,
            samples,
            strategies,
        } => {
            let cfg = load(&args)?;
            let kinds = commands::parse_strategies(&strategies).map_err(|error| Failure { code: 2, error })?;
            commands::bench(&cfg, &kinds, warmup, samples)
        }
        Command::SweepSharedDepth(args) => commands::sweep_shared_depth(&load(&args)?),
        Command::Report { input } => commands::report(&input),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        pool = pool.num_threads(jobs);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}
