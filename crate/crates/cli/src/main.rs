use std::path::{Path, PathBuf};
use std::process::ExitCode;

use art_core::experiments::{oracle_values, run_experiment, ExperimentConfig, Mode};
use art_core::surrogate::fmt17;
use art_core::ArtError;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "art", about = "Adaptive reduced tempering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run replicated experiments and write CSV outputs.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["art", "baseline", "idealized"])]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print quadrature truths for the configured problem.
    Oracle {
        #[arg(long)]
        config: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn load(path: &Path) -> Result<ExperimentConfig, ExitCode> {
    ExperimentConfig::from_file(path).map_err(|e| {
        eprintln!("art: {e}");
        ExitCode::from(EXIT_CONFIG)
    })
}

fn run(cli: Cli) -> Result<(), ExitCode> {
    match cli.command {
        Command::Oracle { config } => {
            let config = load(&config)?;
            let spec = config.problem_spec().map_err(|e| {
                eprintln!("art: {e}");
                ExitCode::from(EXIT_CONFIG)
            })?;
            let values = oracle_values(&spec).map_err(|e| {
                eprintln!("art: {e}");
                ExitCode::from(EXIT_RUNTIME)
            })?;
            for (name, v) in values {
                println!("{name}\t{}", fmt17(v));
            }
            Ok(())
        }
        Command::Run {
            config,
            mode,
            seed,
            out,
        } => {
            let mut config = load(&config)?;
            if let Some(m) = mode {
                config.mode = Mode::parse(&m).map_err(|_| ExitCode::from(EXIT_CONFIG))?;
            }
            if let Some(s) = seed {
                config.seed = s;
            }
            if let Some(o) = out {
                config.out = o;
            }
            let summary = run_experiment(&config).map_err(|e| {
                eprintln!("art: {e}");
                match e {
                    ArtError::Config(_) => ExitCode::from(EXIT_CONFIG),
                    _ => ExitCode::from(EXIT_RUNTIME),
                }
            })?;
            if summary.failed > 0 {
                eprintln!(
                    "art: {} of {} replicates failed (see replicates.csv)",
                    summary.failed, summary.total
                );
            }
            if summary.all_failed() {
                return Err(ExitCode::from(EXIT_RUNTIME));
            }
            println!("wrote {}", summary.out_dir.join("metrics.csv").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => code,
    }
}
