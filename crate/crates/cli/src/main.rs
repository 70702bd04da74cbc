//! `prehab` command-line interface.
//!
//! Stage subcommands (`gen-data` .. `rehab`) run the grid up to that stage,
//! loading any checkpoint already on disk, so separate invocations compose.
//! `sweep` runs everything and writes `report.csv` and `report.json`.
//!
//! Exit codes: 0 success, 1 config error, 2 stage failure (the partial
//! report is still written).

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use prehab::pipeline::{
    emit_report, run_experiment, CellFilter, ExperimentConfig, ExperimentReport, PipelineError, ReportFormat,
    RunOptions, StageStatus, Step,
};

#[derive(Parser)]
#[command(
    name = "prehab",
    version,
    about = "Spectral conditioning before low-rank compression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate planted-teacher datasets.
    GenData(Common),
    /// Train base models.
    Train(Common),
    /// Collect calibration statistics for base models.
    Calibrate(Common),
    /// Run prehab for every λ > 0.
    Prehab(Common),
    /// Compress with every method and ratio.
    Compress(Common),
    /// Fine-tune compressed factors.
    Rehab(Common),
    /// Evaluate the selected cells and print their records as JSON.
    Eval(Common),
    /// Re-emit report.csv from report.json in the output directory.
    Report(ReportArgs),
    /// Run the whole grid and write the report.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints and reports.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Run a single grid seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Reuse checkpoints already on disk (always on for stage subcommands).
    #[arg(long)]
    resume: bool,
    /// Restrict the grid: "method=…,ratio=…,lambda=…,seed=…".
    #[arg(long)]
    cell: Option<String>,
    /// Stop after computing this many stages (interruption testing).
    #[arg(long, hide = true)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

enum Failure {
    Config(anyhow::Error),
    Stage(anyhow::Error),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => Failure::Config(e.into()),
            other => Failure::Stage(other.into()),
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(spec) = &common.cell {
        let filter: CellFilter = spec.parse()?;
        config = config.restrict(&filter)?;
    }
    if let Some(seed) = common.seed {
        config = config.restrict(&CellFilter {
            seed: Some(seed),
            ..CellFilter::default()
        })?;
    }
    Ok(config)
}

fn print_records(report: &ExperimentReport) {
    for r in &report.records {
        let acc = r.test_accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<13} ratio={:<4} lambda={:<5} seed={:<3} {:<8} {:<11} acc={acc}{}",
            r.method.as_str(),
            r.ratio,
            r.lambda,
            r.seed,
            r.stage.as_str(),
            r.status.as_str(),
            r.error.as_deref().map(|e| format!("  error: {e}")).unwrap_or_default(),
        );
    }
}

fn run(command: Command) -> Result<(), Failure> {
    let (common, through, sweep, eval) = match command {
        Command::GenData(c) => (c, Step::Dataset, false, false),
        Command::Train(c) => (c, Step::Base, false, false),
        Command::Calibrate(c) => (c, Step::Calibrate, false, false),
        Command::Prehab(c) => (c, Step::Prehab, false, false),
        Command::Compress(c) => (c, Step::Surgery, false, false),
        Command::Rehab(c) => (c, Step::Rehab, false, false),
        Command::Eval(c) => (c, Step::Rehab, false, true),
        Command::Sweep(c) => (c, Step::Rehab, true, false),
        Command::Report(args) => {
            let path = args.out.join("report.json");
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(Failure::Config)?;
            let report = ExperimentReport::from_json(&text)?;
            emit_report(&report, &args.out, &[ReportFormat::Csv])?;
            print_records(&report);
            return Ok(());
        }
    };
    let config = load_config(&common)?;
    let opts = RunOptions {
        resume: common.resume || !sweep,
        stop_after: common.stop_after,
        through,
    };
    let report = run_experiment(&config, &common.out, &opts)?;
    if sweep {
        emit_report(&report, &common.out, &[ReportFormat::Csv, ReportFormat::Json])?;
    }
    if eval {
        let text = serde_json::to_string_pretty(&report.records)
            .context("serializing records")
            .map_err(Failure::Stage)?;
        println!("{text}");
    } else {
        print_records(&report);
    }
    if report.records.iter().any(|r| r.status == StageStatus::Failed) {
        return Err(Failure::Stage(anyhow::anyhow!(
            "{} stage(s) failed; see the report for details",
            report.failures
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
