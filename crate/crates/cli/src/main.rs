use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gridcast::config::PipelineConfig;
use gridcast::pipeline::{Pipeline, OUT_DIR_ENV};
use gridcast::Error;

#[derive(Parser, Debug)]
#[command(name = "gridcast", version, about = "Graph-based probabilistic load forecasting")]
struct Cli {
    /// TOML configuration file; built-in defaults are used when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a configuration value, e.g. `--set train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output directory.
    #[arg(short, long, global = true, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,

    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write the synthetic dataset as CSV files.
    Generate,
    /// Train the model and write a checkpoint and loss trace.
    Train,
    /// Score the calibration split and write the score window.
    Calibrate,
    /// Stream the test split and write prediction intervals.
    Predict,
    /// Score the written intervals.
    Evaluate,
    /// Run every stage.
    E2e,
}

fn run(cli: &Cli) -> Result<(), Error> {
    let base = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let config = base.with_overrides(&overrides)?;
    let pipeline = Pipeline::new(config, cli.out.clone())?;
    let out = pipeline.out_dir().display().to_string();
    match cli.command {
        Command::Generate => {
            let paths = pipeline.generate()?;
            log::info!("wrote {}", paths.readings.display());
        }
        Command::Train => {
            let report = pipeline.train()?;
            if let (Some(first), Some(last)) = (report.epoch_losses.first(), report.epoch_losses.last()) {
                log::info!("loss {first:.4} -> {last:.4} over {} steps", report.steps);
            }
        }
        Command::Calibrate => {
            let state = pipeline.calibrate()?;
            log::info!("calibrated {} window(s)", state.states.len());
        }
        Command::Predict => {
            let rows = pipeline.predict()?;
            log::info!("wrote {} intervals", rows.len());
        }
        Command::Evaluate | Command::E2e => {
            let report = if matches!(cli.command, Command::E2e) {
                pipeline.e2e()?
            } else {
                pipeline.evaluate()?
            };
            println!("{}", serde_json::to_string(&report)?);
        }
    }
    log::info!("artifacts in {out}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
