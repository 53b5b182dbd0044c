use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mfrel::active_loop::Method;
use mfrel::benchmarks::{mcs_reference, problem_by_name};
use mfrel::experiment::{parse_config, run_experiment};
use mfrel::Error;

#[derive(Parser)]
#[command(name = "mfrel", version, about = "Adaptive multi-fidelity reliability analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON configuration.
    Run {
        config: PathBuf,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Base seed (overrides `seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Repetitions per method (overrides `repetitions`).
        #[arg(long)]
        reps: Option<usize>,
        /// Only run this method.
        #[arg(long)]
        method: Option<String>,
    },
    /// Brute-force Monte Carlo estimate of a named problem.
    Reference {
        problem: String,
        #[arg(long, default_value_t = 1_000_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

const CONFIG_ERROR: u8 = 2;
const RUN_FAILED: u8 = 1;

fn config_error(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(CONFIG_ERROR)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { CONFIG_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run { config, out, seed, reps, method } => {
            let text = match std::fs::read_to_string(&config) {
                Ok(t) => t,
                Err(e) => return config_error(format!("reading {}: {e}", config.display())),
            };
            let mut cfg = match parse_config(&text) {
                Ok(c) => c,
                Err(e) => return config_error(e),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(r) = reps {
                cfg.repetitions = r;
            }
            if let Some(name) = method {
                let m: Method = match name.parse() {
                    Ok(m) => m,
                    Err(e) => return config_error(e),
                };
                cfg.methods.retain(|x| *x == m);
                if cfg.methods.is_empty() {
                    return config_error(format!("method {m} is not part of the configuration"));
                }
            }
            if let Err(e) = cfg.validate() {
                return config_error(e);
            }
            let out = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("results"));
            match run_experiment(&cfg, Some(&out)) {
                Ok(result) => {
                    let path = out.join("summary.csv");
                    log::info!("summary written to {}", path.display());
                    if let Ok(text) = std::fs::read_to_string(&path) {
                        print!("{text}");
                    }
                    if result.all_succeeded() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(RUN_FAILED)
                    }
                }
                Err(e @ (Error::Config(_) | Error::Parse { .. })) => config_error(e),
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(RUN_FAILED)
                }
            }
        }
        Command::Reference { problem, n, seed } => {
            let p = match problem_by_name(&problem) {
                Ok(p) => p,
                Err(e) => return config_error(e),
            };
            match mcs_reference(&p, n, seed) {
                Ok(r) => {
                    println!("{}", serde_json::to_string_pretty(&r).expect("reference serializes"));
                    ExitCode::SUCCESS
                }
                Err(e) => config_error(e),
            }
        }
    }
}
