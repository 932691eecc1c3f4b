use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gwclass::pipeline::{describe_outputs, run_command, Command, PipelineConfig};
use gwclass::{Error, ErrorKind};

/// Geographically weighted classification pipeline.
#[derive(Debug, Parser)]
#[command(name = "gwclass", version)]
struct Cli {
    #[command(subcommand)]
    command: Stage,

    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,

    /// Output directory, overriding `run.output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Stage {
    /// Generate a synthetic dataset and its ground truth.
    Synth,
    /// Factor analysis, communality filter and MST pruning.
    SelectVars,
    /// Spatially cross-validated global multinomial LR and random forest.
    FitGlobal,
    /// Getis-Ord statistics on a global model's error surface.
    Autocorr,
    /// Per-class GW logistic regression and forest with bandwidth selection.
    FitGw,
    /// Merge every stage's outputs into one report.
    Report,
}

impl From<Stage> for Command {
    fn from(s: Stage) -> Self {
        match s {
            Stage::Synth => Command::Synth,
            Stage::SelectVars => Command::SelectVars,
            Stage::FitGlobal => Command::FitGlobal,
            Stage::Autocorr => Command::Autocorr,
            Stage::FitGw => Command::FitGw,
            Stage::Report => Command::Report,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn run(cli: &Cli) -> Result<String, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.run.output_dir = out.clone();
    }
    let cmd = Command::from(cli.command);
    run_command(cmd, &cfg, cli.workers)?;
    Ok(describe_outputs(cmd, &cfg))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("gwclass: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
