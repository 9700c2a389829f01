use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unifilt::harness::{compute_rmse, read_states, run_experiment, RunConfig};
use unifilt::Error;

/// Twin experiments for the United Filter and the AugEnKF baseline.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its outputs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run the repeats one after another.
        #[arg(long)]
        serial: bool,
    },
    /// Parse and check a configuration, then print it with all defaults.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Per-step state RMSE between two trajectory files.
    Rmse {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
}

fn load(path: &PathBuf) -> Result<RunConfig, ExitCode> {
    RunConfig::from_file(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(1)
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run { config, out, serial } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            if let Some(dir) = out {
                cfg.output.dir = dir;
            }
            if serial {
                cfg.output.parallel = false;
            }
            match run_experiment(&cfg) {
                Ok(report) => {
                    for o in &report.outcomes {
                        if let Err(e) = &o.result {
                            eprintln!("repeat {}: {e}", o.repeat);
                        }
                    }
                    println!(
                        "{} of {} repeats succeeded; outputs in {}",
                        report.outcomes.len() - report.failures(),
                        report.outcomes.len(),
                        report.dir.display()
                    );
                    ExitCode::from(report.exit_code() as u8)
                }
                Err(e @ Error::Config { .. }) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
        Command::Validate { config } => {
            let resolved = match load(&config).map(|c| c.resolved()) {
                Ok(Ok(r)) => r,
                Ok(Err(e)) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
                Err(code) => return code,
            };
            match resolved.to_toml() {
                Ok(text) => {
                    print!("{text}");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Rmse { est, truth } => {
            let result = read_states(&est).and_then(|e| compute_rmse(&e, &read_states(&truth)?));
            match result {
                Ok(rmse) => {
                    println!("step,state_rmse");
                    for (n, v) in rmse.iter().enumerate() {
                        println!("{n},{v}");
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
    }
}
