use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::{Command, ExitCode};

use clap::{Args, Parser, Subcommand};
use ivpkit::bench::{ratio_confidence_interval, time_repeated, SamplePair};
use ivpkit_cli::{
    builtin_workload, diff_outputs, format_real, run_cartesian, run_polar, DiffVerdict,
    PendulumConfig, RunError,
};

#[derive(Parser)]
#[command(name = "ivpkit", about = "Pendulum example programs and benchmark harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Polar pendulum (Adams + functional iteration) with impact events
    PendulumPolar(RunArgs),
    /// Cartesian pendulum as an index-1 DAE (BDF + Newton, dense 5x5)
    PendulumCartesian(RunArgs),
    /// Byte-compare two trajectory files
    Diff { a: PathBuf, b: PathBuf },
    /// Time workloads and print a rank-sum ratio confidence interval
    Bench(BenchArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value_t = 10.0)]
    t_end: f64,
    #[arg(long, default_value_t = 0.01)]
    dt: f64,
    #[arg(long)]
    rtol: Option<f64>,
    #[arg(long)]
    atol: Option<f64>,
    /// Write rows to this file instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Append diagnostic columns (polar: energy; cartesian: tension p)
    #[arg(long)]
    debug_cols: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Task executions per timed sample
    #[arg(long, default_value_t = 1)]
    reps: usize,
    /// Number of timed samples per side
    #[arg(long, default_value_t = 10)]
    trials: usize,
    /// Shell command timed as the baseline (requires --candidate)
    #[arg(long, requires = "candidate", conflicts_with = "builtin")]
    baseline: Option<String>,
    /// Shell command timed as the candidate (requires --baseline)
    #[arg(long, requires = "baseline", conflicts_with = "builtin")]
    candidate: Option<String>,
    /// In-process workload pair CANDIDATE:BASELINE (names: polar, cartesian),
    /// or a single name timed against itself
    #[arg(long)]
    builtin: Option<String>,
    /// Confidence level for the interval
    #[arg(long, default_value_t = 0.995)]
    level: f64,
}

fn run_to(args: &RunArgs, f: impl FnOnce(&PendulumConfig, bool, &mut dyn Write) -> Result<(), RunError>) -> Result<(), RunError> {
    let cfg = PendulumConfig {
        t_end: args.t_end,
        dt: args.dt,
        rtol: args.rtol,
        atol: args.atol,
        ..PendulumConfig::default()
    };
    match &args.out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            f(&cfg, args.debug_cols, &mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            f(&cfg, args.debug_cols, &mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn time_command(cmd: &str, reps: usize, trials: usize) -> Result<Vec<f64>, String> {
    let mut failure: Option<String> = None;
    let samples = time_repeated(
        || {
            if failure.is_some() {
                return;
            }
            match Command::new("sh").arg("-c").arg(cmd).output() {
                Ok(out) if out.status.success() => {}
                Ok(out) => failure = Some(format!("`{cmd}` exited with {}", out.status)),
                Err(e) => failure = Some(format!("`{cmd}` failed to start: {e}")),
            }
        },
        reps,
        trials,
    )
    .map_err(|e| e.to_string())?;
    match failure {
        Some(m) => Err(m),
        None => Ok(samples),
    }
}

fn bench(args: &BenchArgs) -> Result<Result<(), String>, String> {
    // outer Err = usage problem (exit 2), inner Err = runtime failure (exit 1)
    let (o_samples, c_samples) = match (&args.builtin, &args.candidate, &args.baseline) {
        (Some(spec), None, None) => {
            let (cand, base) = match spec.split_once(':') {
                Some((c, b)) => (c, b),
                None => (spec.as_str(), spec.as_str()),
            };
            let mut cand = builtin_workload(cand)
                .ok_or_else(|| format!("unknown builtin workload `{cand}`"))?;
            let mut base = builtin_workload(base)
                .ok_or_else(|| format!("unknown builtin workload `{base}`"))?;
            let o = match time_repeated(&mut *cand, args.reps, args.trials) {
                Ok(s) => s,
                Err(e) => return Ok(Err(e.to_string())),
            };
            let c = match time_repeated(&mut *base, args.reps, args.trials) {
                Ok(s) => s,
                Err(e) => return Ok(Err(e.to_string())),
            };
            (o, c)
        }
        (None, Some(cand), Some(base)) => {
            let o = match time_command(cand, args.reps, args.trials) {
                Ok(s) => s,
                Err(e) => return Ok(Err(e)),
            };
            let c = match time_command(base, args.reps, args.trials) {
                Ok(s) => s,
                Err(e) => return Ok(Err(e)),
            };
            (o, c)
        }
        _ => {
            return Err("pass either --builtin NAME or both --candidate and --baseline".into())
        }
    };
    let pair = match SamplePair::new(o_samples, c_samples) {
        Ok(p) => p,
        Err(e) => return Ok(Err(e.to_string())),
    };
    let ci = match ratio_confidence_interval(&pair, args.level) {
        Ok(ci) => ci,
        Err(e) => return Ok(Err(e.to_string())),
    };
    println!(
        "{}\t{}\t{}",
        format_real(ci.lo),
        format_real(pair.median_ratio()),
        format_real(ci.hi)
    );
    Ok(Ok(()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::PendulumPolar(args) => match run_to(&args, |c, d, w| run_polar(c, d, w)) {
            Ok(()) => ExitCode::SUCCESS,
            Err(RunError::Config(m)) => {
                eprintln!("ivpkit: {m}");
                ExitCode::from(2)
            }
            Err(e) => {
                eprintln!("ivpkit: {e}");
                ExitCode::from(1)
            }
        },
        Cmd::PendulumCartesian(args) => match run_to(&args, |c, d, w| run_cartesian(c, d, w)) {
            Ok(()) => ExitCode::SUCCESS,
            Err(RunError::Config(m)) => {
                eprintln!("ivpkit: {m}");
                ExitCode::from(2)
            }
            Err(e) => {
                eprintln!("ivpkit: {e}");
                ExitCode::from(1)
            }
        },
        Cmd::Diff { a, b } => match diff_outputs(&a, &b) {
            Ok(DiffVerdict::Identical) => {
                println!("identical");
                ExitCode::SUCCESS
            }
            Ok(DiffVerdict::FirstDifference(off)) => {
                println!("first-difference\t{off}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("ivpkit: {e}");
                ExitCode::from(1)
            }
        },
        Cmd::Bench(args) => match bench(&args) {
            Ok(Ok(())) => ExitCode::SUCCESS,
            Ok(Err(m)) => {
                eprintln!("ivpkit: {m}");
                ExitCode::from(1)
            }
            Err(m) => {
                eprintln!("ivpkit: {m}");
                ExitCode::from(2)
            }
        },
    }
}
