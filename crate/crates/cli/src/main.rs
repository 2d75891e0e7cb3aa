use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ncb_cli::config::{load_config, Method, ResolvedConfig};
use ncb_cli::exit_codes;
use ncb_cli::{oracle_check, runner};

/// Training and evaluation for budget-constrained multi-agent bidding.
#[derive(Parser)]
#[command(name = "ncb", version, about)]
struct Cli {
    /// Force single-threaded execution and zeroed wall-clock fields for
    /// bit-reproducible outputs.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Path to the experiment TOML file.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train one method on one (epsilon, seed) cell.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Override the training seed (defaults to the first entry of `seeds`).
        #[arg(long)]
        seed: Option<u64>,
        /// Override the tolerance (defaults to the first entry of `epsilon_list`).
        #[arg(long)]
        epsilon: Option<f64>,
        /// Override the configured method.
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
    },
    /// Run the full epsilon x seed grid and write a summary CSV.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Evaluate the exploitability of a saved checkpoint.
    Exploit {
        #[command(flatten)]
        config: ConfigArg,
        /// Path to a `.ncbp` policy checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the exact-oracle validation suite.
    OracleCheck,
    /// Render plots from a finished sweep directory.
    Report {
        /// A sweep output directory containing summary.csv and cell dirs.
        #[arg(long)]
        sweep_dir: PathBuf,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "bpg" => Ok(Method::Bpg),
        "bpg_zero" => Ok(Method::BpgZero),
        "fully_cooperative" => Ok(Method::FullyCooperative),
        "independent" => Ok(Method::Independent),
        other => Err(format!(
            "unknown method {other:?}; expected bpg, bpg_zero, fully_cooperative, or independent"
        )),
    }
}

fn configure_threads(deterministic: bool) {
    let threads = if deterministic {
        Some(1)
    } else {
        std::env::var("NCB_THREADS").ok().and_then(|v| v.parse::<usize>().ok())
    };
    if let Some(n) = threads {
        // ignore the error if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn load(path: &PathBuf) -> Result<ResolvedConfig, ExitCode> {
    load_config(path).map_err(|e| {
        eprintln!("config error: {e}");
        ExitCode::from(exit_codes::CONFIG_ERROR as u8)
    })
}

fn runtime_error(e: anyhow::Error) -> ExitCode {
    eprintln!("error: {e:#}");
    ExitCode::from(exit_codes::RUNTIME_ERROR as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads(cli.deterministic);

    match cli.command {
        Command::Train { config, seed, epsilon, method } => {
            let resolved = match load(&config.config) {
                Ok(r) => r,
                Err(code) => return code,
            };
            let seed = seed.unwrap_or(resolved.experiment.seeds[0]);
            let epsilon = epsilon.unwrap_or(resolved.experiment.epsilon_list[0]);
            let method = method.unwrap_or(resolved.experiment.method);
            match runner::run_train(&resolved, method, seed, epsilon, cli.deterministic) {
                Ok(_) => ExitCode::from(exit_codes::OK as u8),
                Err(e) => runtime_error(e),
            }
        }
        Command::Sweep { config } => {
            let resolved = match load(&config.config) {
                Ok(r) => r,
                Err(code) => return code,
            };
            match runner::run_sweep(&resolved, cli.deterministic) {
                Ok(_) => ExitCode::from(exit_codes::OK as u8),
                Err(e) => runtime_error(e),
            }
        }
        Command::Exploit { config, checkpoint } => {
            let resolved = match load(&config.config) {
                Ok(r) => r,
                Err(code) => return code,
            };
            match runner::run_exploit(&resolved, &checkpoint) {
                Ok(_) => ExitCode::from(exit_codes::OK as u8),
                Err(e) => runtime_error(e),
            }
        }
        Command::OracleCheck => {
            let results = oracle_check::run_suite();
            let mut all_passed = true;
            for r in &results {
                let status = if r.passed { "PASS" } else { "FAIL" };
                println!("{status}  {}: {}", r.name, r.detail);
                all_passed &= r.passed;
            }
            if all_passed {
                println!("all {} oracle checks passed", results.len());
                ExitCode::from(exit_codes::OK as u8)
            } else {
                eprintln!("oracle checks failed");
                ExitCode::from(exit_codes::ORACLE_CHECK_FAILED as u8)
            }
        }
        Command::Report { sweep_dir } => match runner::run_report(&sweep_dir) {
            Ok(_) => ExitCode::from(exit_codes::OK as u8),
            Err(e) => runtime_error(e),
        },
    }
}
