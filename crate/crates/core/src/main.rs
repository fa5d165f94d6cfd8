use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use persona_bias::pipeline::{self, Run};

/// Persona-conditioned hate-speech evaluation harness.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and split the corpus, write the prompt manifest
    Prepare(Args),
    /// Query the configured backend for every manifest row
    Run(Args),
    /// Normalize answers and write per-group metrics
    Score(Args),
    /// Chi-squared tests of every persona group against the reference
    Stats(Args),
    /// Write debias training pairs and loss golden vectors
    ExportTrain(Args),
    /// Render tables and plot data from metrics and significance files
    Report(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Run configuration (TOML)
    #[arg(long, short)]
    config: PathBuf,
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let (Command::Prepare(a)
    | Command::Run(a)
    | Command::Score(a)
    | Command::Stats(a)
    | Command::ExportTrain(a)
    | Command::Report(a)) = &cli.command;
    let run = Run::open(&a.config)?;
    match cli.command {
        Command::Prepare(_) => {
            let s = pipeline::prepare(&run)?;
            println!("train {}  test {}  manifest {}", s.train, s.test, s.manifest);
        }
        Command::Run(_) => {
            let s = pipeline::run_generation(&run, None)?;
            println!(
                "completed {}  failed {}  skipped {}  pending {}",
                s.completed, s.failed, s.skipped, s.pending
            );
        }
        Command::Score(_) => {
            let c = pipeline::score(&run)?;
            println!("hate {}  neutral {}  invalid {}", c.hate, c.neutral, c.invalid);
        }
        Command::Stats(_) => {
            let n = pipeline::stats(&run)?;
            println!("{n} tests");
        }
        Command::ExportTrain(_) => {
            let s = pipeline::export_train(&run)?;
            println!("pairs {}  golden vectors {}", s.pairs, s.golden);
        }
        Command::Report(_) => {
            for p in pipeline::report(&run)? {
                println!("{}", p.display());
            }
        }
    }
    println!("{}", run.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
