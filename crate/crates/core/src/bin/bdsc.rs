//! Experiment runner CLI.
//!
//! Pipelines are subcommands; every run needs explicit seeds, either from
//! the config file or the flags. Exit status is nonzero when any check
//! fails.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bdsc::config::{ExperimentConfig, Pipeline};
use bdsc::csvio::render_summary;
use bdsc::error::Error;

#[derive(Parser)]
#[command(
    name = "bdsc",
    about = "Backward doubly stochastic control: solvers and verification suites",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML configuration file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for CSV artifacts and the summary.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Registry model name (required when no config file is given).
    #[arg(long)]
    model: Option<String>,
    /// Forward-noise master seed (required when no config file is given).
    #[arg(long)]
    seed: Option<u64>,
    /// Backward-driver seed (required when no config file is given).
    #[arg(long, value_name = "N")]
    b_seed: Option<u64>,
    /// Number of Monte Carlo paths.
    #[arg(long, value_name = "M")]
    paths: Option<usize>,
    /// Number of time steps.
    #[arg(long, value_name = "N")]
    steps: Option<usize>,
    /// Worker threads (0 = library default).
    #[arg(long)]
    threads: Option<usize>,
    /// Repeatable `key=value` override (e.g. `model.sigma=0.4`,
    /// `grid.space_points=101`).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the forward ensemble and run the moment checks.
    Simulate(RunArgs),
    /// Solve the backward equation on the simulated ensemble.
    SolveBdsde(RunArgs),
    /// Run the penalized solver along the configured ladder.
    SolvePenalized(RunArgs),
    /// Solve the value field with both backends and compare them.
    Value(RunArgs),
    /// Verify the dynamic programming principle on probe points.
    VerifyDpp(RunArgs),
    /// Verify the weak-solution certificate.
    VerifyWeak(RunArgs),
    /// Run every verification suite.
    VerifyAll(RunArgs),
    /// Aggregate the checks of one or more runs into a single table.
    Report {
        /// Directory containing run artifacts.
        #[arg(long, default_value = "out")]
        dir: PathBuf,
    },
}

fn build_config(pipeline: Pipeline, args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut config = match &args.config {
        Some(path) => {
            let mut c = ExperimentConfig::from_file(path)?;
            c.pipeline = pipeline;
            c
        }
        None => {
            let model = args.model.clone().ok_or_else(|| {
                Error::Config("--model is required when no --config file is given".into())
            })?;
            let seed = args.seed.ok_or_else(|| {
                Error::Config("--seed is required when no --config file is given".into())
            })?;
            let b_seed = args.b_seed.ok_or_else(|| {
                Error::Config("--b-seed is required when no --config file is given".into())
            })?;
            ExperimentConfig::minimal(pipeline, &model, seed, b_seed)
        }
    };
    if let Some(model) = &args.model {
        config.model = model.clone();
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        config.paths.master_seed = seed;
    }
    if let Some(b_seed) = args.b_seed {
        config.paths.b_seed = b_seed;
    }
    if let Some(paths) = args.paths {
        config.paths.m_paths = paths;
    }
    if let Some(steps) = args.steps {
        config.grid.n_steps = steps;
    }
    if let Some(threads) = args.threads {
        config.solver.threads = threads;
    }
    for ov in &args.overrides {
        let (key, value) = ov.split_once('=').ok_or_else(|| {
            Error::Config(format!("override '{ov}' must have the form key=value"))
        })?;
        config.apply_override(key.trim(), value.trim())?;
    }
    Ok(config)
}

fn execute(pipeline: Pipeline, args: &RunArgs) -> ExitCode {
    let config = match build_config(pipeline, args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match bdsc::runner::run(&config) {
        Ok(outcome) => {
            print!("{}", render_summary(&outcome.records));
            println!("artifacts: {}", outcome.out_dir.display());
            if outcome.all_passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Simulate(args) => execute(Pipeline::Simulate, args),
        Command::SolveBdsde(args) => execute(Pipeline::SolveBdsde, args),
        Command::SolvePenalized(args) => execute(Pipeline::SolvePenalized, args),
        Command::Value(args) => execute(Pipeline::Value, args),
        Command::VerifyDpp(args) => execute(Pipeline::VerifyDpp, args),
        Command::VerifyWeak(args) => execute(Pipeline::VerifyWeak, args),
        Command::VerifyAll(args) => execute(Pipeline::VerifyAll, args),
        Command::Report { dir } => match bdsc::report::report(dir) {
            Ok(table) => {
                print!("{table}");
                match bdsc::report::all_passed(dir) {
                    Ok(true) => ExitCode::SUCCESS,
                    Ok(false) => ExitCode::FAILURE,
                    Err(_) => ExitCode::from(2),
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
    }
}
