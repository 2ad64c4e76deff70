//! Argument parsing and dispatch for the `mplnfa` binary.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{self, EvaluateArgs, FitArgs, SimulateArgs};
use crate::{CliError, CliResult};

/// Cluster count data with mixtures of Poisson-log-normal factor analyzers.
#[derive(Parser)]
#[command(name = "mplnfa", version)]
struct Cli {
    /// Worker threads (falls back to MPLNFA_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit every (G, K, model) in a grid and report the BIC choice.
    Fit(FitCmd),
    /// Write simulated datasets and their ground truth.
    Simulate(SimulateCmd),
    /// Score fits against simulation truth.
    Evaluate(EvaluateCmd),
}

#[derive(Args)]
struct FitCmd {
    /// Count CSV: header row, sample ids in the first column.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 1)]
    gmin: usize,
    #[arg(long, default_value_t = 3)]
    gmax: usize,
    #[arg(long, default_value_t = 1)]
    kmin: usize,
    #[arg(long, default_value_t = 2)]
    kmax: usize,
    /// Comma-separated model codes (e.g. UUU,CCC) or "all".
    #[arg(long, default_value = "all")]
    models: String,
    /// none, libsize or file.
    #[arg(long, default_value = "none")]
    normalize: String,
    /// Factor CSV for --normalize file.
    #[arg(long)]
    factors: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// k-means seedings per initialization.
    #[arg(long, default_value_t = 3)]
    starts: usize,
    /// Whole-EM restarts per triple.
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    /// Relative ELBO change that stops the outer loop.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value = "mplnfa_out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SimulateCmd {
    /// setting1, setting2 or setting3.
    #[arg(long)]
    preset: Option<String>,
    /// Parameter JSON (same layout as `parameters` in truth.json).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Samples per replicate (defaults to the preset's n).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 1)]
    replicates: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "mplnfa_sim")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvaluateCmd {
    /// Directory of replicate subdirectories holding report.json.
    #[arg(long)]
    fits: PathBuf,
    /// Directory of replicate subdirectories holding truth.json.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value = "mplnfa_eval")]
    out_dir: PathBuf,
}

fn thread_count(flag: Option<usize>) -> CliResult<Option<usize>> {
    if let Some(n) = flag {
        return if n == 0 {
            Err(CliError::Validation("--threads must be at least 1".into()))
        } else {
            Ok(Some(n))
        };
    }
    match std::env::var("MPLNFA_THREADS") {
        Ok(v) if !v.trim().is_empty() => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Validation(format!(
                "MPLNFA_THREADS must be a positive integer, got '{v}'"
            ))),
        },
        _ => Ok(None),
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Fit(c) => {
            let report = commands::run_fit(&FitArgs {
                input: c.input,
                gmin: c.gmin,
                gmax: c.gmax,
                kmin: c.kmin,
                kmax: c.kmax,
                models: c.models,
                normalize: c.normalize,
                factors: c.factors,
                seed: c.seed,
                starts: c.starts,
                restarts: c.restarts,
                max_iter: c.max_iter,
                tol: c.tol,
                out_dir: c.out_dir.clone(),
            })?;
            let s = &report.selected;
            println!(
                "selected G={} K={} {} (BIC {:.3}, ICL {:.3}); results in {}",
                s.g,
                s.k,
                s.model,
                s.bic,
                s.icl,
                c.out_dir.display()
            );
        }
        Command::Simulate(c) => {
            let dirs = commands::run_simulate(&SimulateArgs {
                preset: c.preset,
                params: c.params,
                n: c.n,
                replicates: c.replicates,
                seed: c.seed,
                out_dir: c.out_dir.clone(),
            })?;
            println!("wrote {} replicate(s) to {}", dirs.len(), c.out_dir.display());
        }
        Command::Evaluate(c) => {
            let e = commands::run_evaluate(&EvaluateArgs {
                fits: c.fits,
                truth: c.truth,
                out_dir: c.out_dir.clone(),
            })?;
            println!(
                "{} replicate(s): mean ARI {:.4} (SD {:.4}); results in {}",
                e.replicates.len(),
                e.ari_mean,
                e.ari_sd,
                c.out_dir.display()
            );
        }
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let threads = thread_count(cli.threads)?;
    #[cfg(feature = "parallel")]
    {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n);
        }
        let pool = builder
            .build()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
        pool.install(|| dispatch(cli.command))
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        dispatch(cli.command)
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
