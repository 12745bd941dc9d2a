use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use twinpeaks::mc::{SimConfig, SimMode};
use twinpeaks::pipeline::{self, PipelineError};

#[derive(Parser)]
#[command(name = "twinpeaks", version, about = "Signaling wealth model: solve, sweep, simulate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Ensemble,
    SingleLongPath,
}

#[derive(Subcommand)]
enum Command {
    /// Solve values, policies, stationary density and diagnostics.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// One full solve per parameter value.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Calibration field name, e.g. phi or lambda_HL.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
        /// Concurrent sub-runs (falls back to TWINPEAKS_WORKERS, then CPU count).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Monte Carlo check against a stored solve.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory written by `solve`.
        #[arg(long = "solve-dir")]
        solve_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        paths: usize,
        #[arg(long, default_value_t = 2e5)]
        horizon: f64,
        #[arg(long, default_value_t = 0.05)]
        dt: f64,
        /// Defaults to min(2e4, horizon / 10).
        #[arg(long = "burn-in")]
        burn_in: Option<f64>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Defaults to single-long-path for one path, ensemble otherwise.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
}

fn fail(e: &PipelineError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Solve { config, out } => match pipeline::cmd_solve(&config, &out) {
            Ok(m) if m.converged => ExitCode::SUCCESS,
            Ok(m) => {
                eprintln!("warning: value iteration did not converge; outputs written to {}", m.output_dir);
                ExitCode::from(2)
            }
            Err(e) => fail(&e),
        },
        Command::Sweep { config, out, param, values, workers } => {
            let workers = workers.unwrap_or_else(pipeline::worker_count);
            match pipeline::cmd_sweep(&config, &param, &values, &out, workers) {
                Ok((_, rows)) => {
                    for r in &rows {
                        if let Err(msg) = &r.outcome {
                            eprintln!("warning: {param}={} failed: {msg}", pipeline::fmt_num(r.param_value));
                        }
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Simulate { config, out, solve_dir, paths, horizon, dt, burn_in, seed, mode } => {
            let mode = match mode {
                Some(Mode::Ensemble) => SimMode::Ensemble,
                Some(Mode::SingleLongPath) => SimMode::SingleLongPath,
                None if paths > 1 => SimMode::Ensemble,
                None => SimMode::SingleLongPath,
            };
            let sim = SimConfig {
                n_paths: paths,
                horizon,
                dt_sim: dt,
                burn_in: burn_in.unwrap_or((horizon / 10.0).min(2e4)),
                seed,
                mode,
                ..SimConfig::default()
            };
            match pipeline::cmd_simulate(&config, &solve_dir, &sim, &out) {
                Ok((_, cmp)) => {
                    println!(
                        "max share gap {:.4}, density L1 {:.4}, mean gap {:.4}",
                        cmp.max_share_gap, cmp.l1_distance, cmp.mean_gap
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
    }
}
