use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use prodfn_cli::{report_only, run, RunConfig, Stages};

/// Gross-output production-function estimation and misallocation
/// analytics over firm panels, with a built-in structural simulator.
#[derive(Debug, Parser)]
#[command(name = "prodfn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration; omitted, a simulator baseline is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap worker threads (0 = library default).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Materialize the data stage only (panel.csv, and truth.csv when
    /// simulating).
    Simulate,
    /// Data stage plus the two-stage production-model fit.
    Estimate,
    /// Estimation plus firm functionals and dispersion analytics.
    Analyze,
    /// Flexible-labor bootstrap test on the configured panel.
    TestLabor,
    /// Analytics plus the industry-cell event study.
    EventStudy,
    /// Re-render report.md from an existing output directory.
    Report,
    /// Run every stage enabled in the configuration.
    RunAll,
}

fn stage_mask(command: &Command, configured: Stages) -> Stages {
    let off = Stages {
        estimate: false,
        functionals: false,
        analytics: false,
        test_labor: false,
        event_study: false,
        report: false,
    };
    match command {
        Command::Simulate => off,
        Command::Estimate => Stages {
            estimate: true,
            ..off
        },
        Command::Analyze => Stages {
            estimate: true,
            functionals: true,
            analytics: true,
            ..off
        },
        Command::TestLabor => Stages {
            test_labor: true,
            ..off
        },
        Command::EventStudy => Stages {
            estimate: true,
            functionals: true,
            analytics: true,
            event_study: true,
            ..off
        },
        Command::RunAll | Command::Report => configured,
    }
}

fn execute(cli: Cli) -> prodfn::Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::simulator_default(0),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(threads) = cli.threads {
        config.threads = threads;
    }
    if let Some(out) = cli.out {
        config.out_dir = out;
    }
    if matches!(cli.command, Command::Report) {
        let manifest = report_only(&config.out_dir)?;
        println!(
            "rendered report.md over {} artifacts in {}",
            manifest.artifacts.len(),
            config.out_dir.display()
        );
        return Ok(());
    }
    config.stages = stage_mask(&cli.command, config.stages);
    let manifest = run(&config)?;
    println!(
        "wrote {} artifacts to {}",
        manifest.artifacts.len(),
        config.out_dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ prodfn::Error::Validation(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
