//! `cmfctl` — harness around the conditional mean-field control engine.
//!
//! Exit codes: 0 ok, 2 config error, 3 numerical failure, 4 non-convergence,
//! 5 validation failure.

mod commands;
mod config;
mod csvio;
mod manifest;

use clap::{Parser, Subcommand};
use cmf_core::CmfError;
use commands::RunContext;
use config::RunConfig;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cmfctl", version, about = "Monte Carlo engine for partially observed conditional mean-field control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone)]
enum Command {
    /// Forward simulation at the point-mass input flow.
    Simulate(CommonArgs),
    /// Fixed-point iteration on the conditional-mean law flow.
    Fixpoint(CommonArgs),
    /// Projected-gradient policy optimization.
    Optimize(CommonArgs),
    /// Validation suites (suite selected in the config).
    Validate(CommonArgs),
}

#[derive(clap::Args, Clone)]
struct CommonArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: String,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<String>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (CMFCTL_THREADS as fallback, else all cores).
    #[arg(long)]
    threads: Option<usize>,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_NONCONVERGED: u8 = 4;
const EXIT_VALIDATION: u8 = 5;

fn classify(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CmfError>() {
        Some(CmfError::NumericalBlowup { .. }) | Some(CmfError::Degeneracy { .. }) => EXIT_NUMERIC,
        Some(CmfError::StaleLaw { .. }) => EXIT_NONCONVERGED,
        Some(_) => EXIT_CONFIG,
        None => EXIT_CONFIG,
    }
}

fn run() -> anyhow::Result<u8> {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::Simulate(a) => ("simulate", a.clone()),
        Command::Fixpoint(a) => ("fixpoint", a.clone()),
        Command::Optimize(a) => ("optimize", a.clone()),
        Command::Validate(a) => ("validate", a.clone()),
    };

    let threads = args
        .threads
        .or_else(|| {
            std::env::var("CMFCTL_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .ok();

    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", args.config))?;
    let cfg = RunConfig::parse(&text)?;
    let mut ctx = RunContext::new(cfg, &text, name, args.out, args.seed, threads)?;

    let code = match name {
        "simulate" => {
            commands::cmd_simulate(&mut ctx)?;
            0
        }
        "fixpoint" => {
            if commands::cmd_fixpoint(&mut ctx)? {
                0
            } else {
                EXIT_NONCONVERGED
            }
        }
        "optimize" => {
            commands::cmd_optimize(&mut ctx)?;
            0
        }
        "validate" => {
            let failures = commands::cmd_validate(&mut ctx)?;
            if failures.is_empty() {
                0
            } else {
                for f in &failures {
                    eprintln!("validation failure: {f}");
                }
                EXIT_VALIDATION
            }
        }
        _ => unreachable!(),
    };
    ctx.finalize()?;
    Ok(code)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}
