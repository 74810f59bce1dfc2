//! `refine-es`: run, resume and report experiment sweeps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use refine_es::pipeline::{self, ExperimentPlan, SweepOptions, SweepSummary, SEED_ENV};
use refine_es::report;

#[derive(Debug, Parser)]
#[command(name = "refine-es", version, about = "Two-stage PPO then ES refinement sweeps")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every cell of a plan into a fresh results directory.
    #[command(after_help = format!("The {SEED_ENV} environment variable (e.g. \"0\", \"1,4\", \"0..3\") replaces the plan's seed list."))]
    Run {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Parallel cells; defaults to the available parallelism.
        #[arg(long)]
        workers: Option<usize>,
        /// Replace an existing results directory.
        #[arg(long)]
        force: bool,
    },
    /// Summarize a results directory and write tables and plots to <dir>/report.
    Report {
        #[arg(long)]
        dir: PathBuf,
        /// Method that P(improvement) is measured against.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Finish the interrupted cells of a results directory.
    Resume {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
}

/// Refuses to touch a non-empty directory unless `force` is set and it holds
/// a previous sweep.
fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    let occupied = out.exists() && fs::read_dir(out).with_context(|| format!("reading {}", out.display()))?.next().is_some();
    if !occupied {
        return Ok(());
    }
    if !force {
        bail!("{} already exists and is not empty; pass --force to replace it", out.display());
    }
    if !out.join("plan.json").is_file() {
        bail!("{} does not look like a results directory (no plan.json); refusing to delete it", out.display());
    }
    fs::remove_dir_all(out).with_context(|| format!("removing {}", out.display()))
}

fn finish(summary: &SweepSummary, dir: &Path) -> ExitCode {
    let done = summary.records.iter().filter(|r| r.is_completed()).count();
    println!("{done} of {} cells completed in {}", summary.records.len(), dir.display());
    if let Some(rep) = &summary.report {
        print!("{}", report::render_text(rep, &[]));
    }
    let failures = summary.failures();
    if failures.is_empty() && summary.interrupted.is_empty() {
        return ExitCode::SUCCESS;
    }
    for r in &failures {
        eprintln!("failed: {} {} seed {}: {}", r.task, r.method, r.seed, r.error.as_deref().unwrap_or("unknown error"));
    }
    if !failures.is_empty() {
        eprintln!("failure manifest: {}", dir.join("failures.json").display());
    }
    ExitCode::FAILURE
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { plan, out, workers, force } => {
            let mut parsed = ExperimentPlan::load(&plan).with_context(|| format!("loading plan {}", plan.display()))?;
            parsed.apply_seed_env()?;
            parsed.validate()?;
            prepare_out_dir(&out, force)?;
            let summary = pipeline::sweep(&parsed, &out, &SweepOptions { workers, stop_hook: None })?;
            Ok(finish(&summary, &out))
        }
        Command::Resume { dir, workers } => {
            if !dir.join("plan.json").is_file() {
                bail!("{} has no plan.json; nothing to resume", dir.display());
            }
            let summary = pipeline::resume(&dir, &SweepOptions { workers, stop_hook: None })?;
            Ok(finish(&summary, &dir))
        }
        Command::Report { dir, baseline } => {
            let out = report::write_report(&dir, baseline.as_deref())?;
            print!("{}", out.text);
            println!("wrote {} files under {}", out.files.len(), dir.join("report").display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
