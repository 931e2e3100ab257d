use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pathvar::functional::CATALOG;
use pathvar::Error;
use pathvar_cli::{render, run, ExperimentConfig};

#[derive(Parser)]
#[command(name = "pathvar", version, about = "Path-space Monte-Carlo experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every experiment of a config.
    Run {
        config: PathBuf,
        /// Worker threads (default: logical cores).
        #[arg(long, env = "PATHVAR_THREADS")]
        threads: Option<usize>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the config's `output`, else `pathvar-out`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
    /// List the functionals usable in configs.
    ListFunctionals,
}

fn config_error(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::ListFunctionals => {
            for (name, what) in CATALOG {
                println!("{name:20} {what}");
            }
            ExitCode::SUCCESS
        }
        Command::Validate { config } => {
            match ExperimentConfig::load(&config).and_then(|c| c.resolve()) {
                Ok(r) => {
                    println!("ok: {} experiments, config hash {}", r.experiments.len(), r.hash);
                    ExitCode::SUCCESS
                }
                Err(e) => config_error(e),
            }
        }
        Command::Run {
            config,
            threads,
            seed,
            out,
        } => {
            let mut cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return config_error(e),
            };
            if let Some(s) = seed {
                cfg.grid.seed = s;
            }
            let out = out
                .or_else(|| cfg.output.clone())
                .unwrap_or_else(|| PathBuf::from("pathvar-out"));
            let resolved = match cfg.resolve() {
                Ok(r) => r,
                Err(e) => return config_error(e),
            };
            if let Some(n) = threads {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: thread pool: {e}");
                    return ExitCode::from(2);
                }
            }
            match run(&resolved, &out) {
                Ok(report) => {
                    print!("{}", render(&report));
                    let code = report.exit_code();
                    for f in report.failing_checks() {
                        eprintln!("failed: {f}");
                    }
                    ExitCode::from(code as u8)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(3)
                }
            }
        }
    }
}
