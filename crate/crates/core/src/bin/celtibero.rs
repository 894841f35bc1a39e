use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use celtibero::config::{parse_config, ExperimentConfig};
use celtibero::orchestrator::run_experiment_with;
use celtibero::report::write_outputs;
use celtibero::Error;

const DEFAULT_OUT: &str = "results";

#[derive(Parser)]
#[command(name = "celtibero", version, about = "Federated-learning poisoning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; falls back to the config's `output_dir`, then CELTIBERO_OUT, then `results`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Suppress per-round progress lines.
        #[arg(long)]
        quiet: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run { config, seed, out, quiet } => {
            let config = match load(&config, seed) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            match run(config, out, quiet) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(if e.is_config_error() { 1 } else { 2 })
                }
            }
        }
    }
}

/// Reads the config; an unreadable file counts as a config error.
fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut config = parse_config(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
        config.validate()?;
    }
    Ok(config)
}

fn run(config: ExperimentConfig, out: Option<PathBuf>, quiet: bool) -> Result<(), Error> {
    let dir = out
        .or_else(|| config.output_dir.clone())
        .or_else(|| std::env::var_os("CELTIBERO_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));

    let outcome = run_experiment_with(&config, |r| {
        if !quiet {
            eprintln!(
                "round {:>3}  participants {:>3}  mta {:.4}  asr {:.4}  benign {:>3}  poisoned {:>3}",
                r.round,
                r.participants.len(),
                r.mta,
                r.asr,
                r.benign_count,
                r.poisoned_count
            );
        }
    })?;
    let files = write_outputs(&dir, &outcome)?;
    if !quiet {
        eprintln!(
            "final mta {:.4}  asr {:.4}",
            outcome.summary.final_mta, outcome.summary.final_asr
        );
    }
    println!("{}", files.rounds.display());
    println!("{}", files.summary.display());
    Ok(())
}
