//! `pwlab`: run potential-well scenarios from a JSON config.
//!
//! Exit status is 0 iff every check of the command passed, 1 if a check
//! failed, and 2 for unreadable configs or bad arguments.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pwlab_core::lab::{run_scenario, Command, RunOptions, RunReport, ScenarioConfig};
use pwlab_core::Execution;

/// Environment variable capping the number of worker threads.
const THREADS_VAR: &str = "PWLAB_THREADS";

#[derive(Parser, Debug)]
#[command(name = "pwlab", version, about = "Potential-well laboratory for the damped cubic Klein-Gordon equation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Compute and certify the ground state, write its record.
    GroundState(RunArgs),
    /// Evolve the configured initial data and check the energy ledger.
    Evolve(RunArgs),
    /// Sweep lambda Q data across the threshold.
    Dichotomy(RunArgs),
    /// Stabilization diagnostics: decay fit, equilibrium, observability.
    Stabilize(RunArgs),
    /// Blow-up under several damping levels, virial convexity.
    Blowup(RunArgs),
    /// Every command above.
    Check(RunArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Scenario configuration (JSON).
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "pwlab-out")]
    out: PathBuf,
    /// Override the time step.
    #[arg(long)]
    dt: Option<f64>,
    /// Override the number of sine modes.
    #[arg(long)]
    modes: Option<usize>,
}

impl Cmd {
    fn split(&self) -> (Command, &RunArgs) {
        match self {
            Cmd::GroundState(a) => (Command::GroundState, a),
            Cmd::Evolve(a) => (Command::Evolve, a),
            Cmd::Dichotomy(a) => (Command::Dichotomy, a),
            Cmd::Stabilize(a) => (Command::Stabilize, a),
            Cmd::Blowup(a) => (Command::Blowup, a),
            Cmd::Check(a) => (Command::Check, a),
        }
    }
}

fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("{THREADS_VAR}={v:?} is not a thread count"))?;
            if n == 0 {
                bail!("{THREADS_VAR} must be at least 1");
            }
            Ok(Some(n))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => bail!("{THREADS_VAR}: {e}"),
    }
}

#[cfg(feature = "parallel")]
fn execution(cap: Option<usize>) -> Result<Execution> {
    match cap {
        Some(1) => Ok(Execution::Sequential),
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("failed to configure the worker pool")?;
            Ok(Execution::Parallel)
        }
        None => Ok(Execution::Parallel),
    }
}

#[cfg(not(feature = "parallel"))]
fn execution(_cap: Option<usize>) -> Result<Execution> {
    Ok(Execution::Sequential)
}

fn load(args: &RunArgs) -> Result<ScenarioConfig> {
    let mut cfg = ScenarioConfig::load(&args.config)?;
    if let Some(dt) = args.dt {
        cfg.time.dt = dt;
    }
    if let Some(n) = args.modes {
        cfg.domain.n_modes = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_report(report: &RunReport) {
    for c in &report.checks {
        println!(
            "{} {:<40} value={:e} tolerance={:e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.tolerance
        );
    }
    for e in &report.errors {
        eprintln!("error: {e}");
    }
    let passed = report.checks.iter().filter(|c| c.passed).count();
    println!(
        "{}: {passed}/{} checks passed in {:.2}s",
        report.command,
        report.checks.len(),
        report.wall_time_s
    );
}

fn run(cli: &Cli) -> Result<bool> {
    let (command, args) = cli.command.split();
    let cfg = load(args)?;
    let exec = execution(thread_cap()?)?;
    let base_dir = args
        .config
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_default();
    let opts = RunOptions {
        out_dir: args.out.clone(),
        base_dir,
        exec,
        write_files: true,
    };
    let report = run_scenario(command, &cfg, &opts);
    print_report(&report);
    Ok(report.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
