use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use cotdrive_cli::config::RunConfig;
use cotdrive_cli::runner::{execute, RunOptions};
use cotdrive_cli::{cmd_ingest, report};

#[derive(Parser)]
#[command(name = "cotdrive", version, about = "Chain-of-thought driving benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a scenario file from nuScenes-style metadata tables.
    Ingest {
        #[arg(long)]
        dataroot: PathBuf,
        /// One scene name or token per line.
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the three-stage pipeline over a scenario file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Continue an existing run, skipping frames already recorded.
        #[arg(long)]
        resume: bool,
        /// Process at most this many scenario frames.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Compare finished runs and write tables, CSV and overlays.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Compare runs made under different decision records.
        #[arg(long)]
        allow_mixed_decisions: bool,
    },
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Ingest { dataroot, scenes, out } => {
            let summary = cmd_ingest(&dataroot, &scenes, &out)?;
            println!("{summary}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { config, resume, limit } => {
            let config = RunConfig::load(&config)?;
            let outcome = execute(
                &config,
                &RunOptions {
                    resume,
                    limit,
                    stop_after: None,
                },
            )?;
            println!(
                "{}: {} frames run, {} skipped, {} total, {} faults",
                outcome.run_dir.display(),
                outcome.executed,
                outcome.skipped,
                outcome.total,
                outcome.faults
            );
            Ok(if outcome.faults > 0 { ExitCode::from(2) } else { ExitCode::SUCCESS })
        }
        Command::Report {
            runs,
            out,
            allow_mixed_decisions,
        } => {
            let report = report::run_report(&runs, &out, allow_mixed_decisions)?;
            println!(
                "{} runs, {} of {} frames retained ({:.1}%), written to {}",
                report.runs.len(),
                report.filter.retained_frame_ids.len(),
                report.filter.universe_size,
                report.filter.retention_rate,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
