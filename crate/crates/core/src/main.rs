//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 data error, 2 usage error, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use saeplan::commands::{self, Outcome, SynthArgs};
use saeplan::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "saeplan",
    version,
    about = "Survey planning for small-area prevalence tables: hierarchical-Bayes fits, \
             suppression-risk search for the minimum effective sampling fraction, and \
             design-based validation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the TOML run configuration.
    #[arg(long, default_value = "saeplan.toml")]
    config: PathBuf,
    /// Override the master seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Max concurrent replications (default: cores - 1).
    #[arg(long)]
    jobs: Option<usize>,
    /// Validate and print the work plan without computing.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Load all configured inputs and run every invariant check.
    Validate(CommonArgs),
    /// Simulate one survey and fit the working model.
    Fit(CommonArgs),
    /// Search for the minimum effective sampling fraction.
    Ssd(CommonArgs),
    /// Design-based validation across scenarios and fractions.
    Simulate(CommonArgs),
    /// Generate a synthetic population bundle.
    Synth {
        /// Number of areas.
        #[arg(long, default_value_t = 50)]
        areas: usize,
        /// Number of groups.
        #[arg(long, default_value_t = 3)]
        groups: usize,
        /// Comma-separated base prevalence per group (defaults to a spread).
        #[arg(long, value_delimiter = ',')]
        rates: Vec<f64>,
        /// Smallest cell headcount.
        #[arg(long, default_value_t = 200)]
        headcount_min: u64,
        /// Largest cell headcount.
        #[arg(long, default_value_t = 1200)]
        headcount_max: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for population/covariates/adjacency files.
        #[arg(long, default_value = "synth")]
        out: PathBuf,
    },
}

fn load_config(args: &CommonArgs) -> saeplan::Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.run.master_seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.paths.out_dir = out.clone();
    }
    if let Some(jobs) = args.jobs {
        cfg.run.jobs = Some(jobs);
    }
    Ok(cfg)
}

fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> saeplan::Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| saeplan::Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn dispatch(cli: Cli) -> saeplan::Result<Outcome> {
    match cli.command {
        Command::Validate(args) => {
            let cfg = load_config(&args)?;
            commands::cmd_validate(&cfg)
        }
        Command::Fit(args) => {
            let cfg = load_config(&args)?;
            in_pool(cfg.jobs(), || commands::cmd_fit(&cfg, args.dry_run))?
        }
        Command::Ssd(args) => {
            let cfg = load_config(&args)?;
            in_pool(cfg.jobs(), || commands::cmd_ssd(&cfg, args.dry_run))?
        }
        Command::Simulate(args) => {
            let cfg = load_config(&args)?;
            in_pool(cfg.jobs(), || commands::cmd_simulate(&cfg, args.dry_run))?
        }
        Command::Synth {
            areas,
            groups,
            rates,
            headcount_min,
            headcount_max,
            seed,
            out,
        } => commands::cmd_synth(&SynthArgs {
            areas,
            groups,
            rates,
            headcount_min,
            headcount_max,
            seed,
            out_dir: out,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(outcome) => {
            for msg in &outcome.messages {
                println!("{msg}");
            }
            for warn in &outcome.warnings {
                eprintln!("warning: {warn}");
            }
            for file in &outcome.files {
                println!("wrote {}", file.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
