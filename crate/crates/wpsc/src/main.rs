//! Command-line front end for the market laboratory.
//!
//! Any configuration key can be overridden inline as `--section.key=value`
//! (e.g. `--workers.count=10`); those flags are peeled off before regular
//! argument parsing. Exit codes: 0 success, 2 configuration error, 3 stage
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wpsc::harness::pipeline::run_stage;
use wpsc::harness::{ExperimentConfig, HarnessError, PipelineStage};

#[derive(Parser)]
#[command(
    name = "wpsc",
    about = "Wireless-powered spatial crowdsourcing market laboratory",
    long_about = "Two-phase market simulator: a Stackelberg task/power allocation \
                  followed by strategyproof mobile base-station deployment. \
                  Configuration comes from a TOML file (see config.example.toml) \
                  plus --section.key=value overrides."
)]
struct Cli {
    /// Path to a TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every stochastic stage (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides output.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic deployment samples (samples.csv).
    GenData,
    /// Parse a GPS trace file and derive workers (ingest.json).
    Ingest,
    /// Solve phase 1 only: the Stackelberg allocation (allocation.json).
    Allocate,
    /// Build and label training samples with optimum deployments (labeled.json).
    Label,
    /// Train the learned deployment mechanism (checkpoint + loss_curve.csv).
    TrainMdl,
    /// Evaluate the configured mechanisms on the test split (metrics.*).
    Evaluate,
    /// Run the strategyproofness audits (audit.json).
    Audit,
    /// Run everything end to end and write all reports.
    Pipeline,
}

impl Command {
    fn stage(&self) -> PipelineStage {
        match self {
            Command::GenData => PipelineStage::GenData,
            Command::Ingest => PipelineStage::Ingest,
            Command::Allocate => PipelineStage::Allocate,
            Command::Label => PipelineStage::Label,
            Command::TrainMdl => PipelineStage::TrainMdl,
            Command::Evaluate => PipelineStage::Evaluate,
            Command::Audit => PipelineStage::Audit,
            Command::Pipeline => PipelineStage::Pipeline,
        }
    }
}

/// Pull `--section.key=value` overrides out of the raw arguments; everything
/// else goes to the regular parser.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    for arg in args {
        let is_override = arg
            .strip_prefix("--")
            .and_then(|body| body.split_once('='))
            .filter(|(key, _)| key.contains('.'))
            .map(|(key, value)| (key.to_string(), value.to_string()));
        match is_override {
            Some(kv) => overrides.push(kv),
            None => rest.push(arg),
        }
    }
    (rest, overrides)
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<Vec<String>, HarnessError> {
    let cfg = ExperimentConfig::load(
        cli.config.as_deref(),
        overrides,
        cli.seed,
        cli.out.as_deref(),
    )?;
    let out = run_stage(&cfg, cli.command.stage())?;
    let mut lines = out.summary;
    for f in &out.files {
        lines.push(format!("wrote {}", f.display()));
    }
    Ok(lines)
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
