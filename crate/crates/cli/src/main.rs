use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpr_core::pipeline::{
    run_evaluate, run_generate_data, run_infer, run_sweep, run_train_refiner, run_train_selector, RunConfig,
};
use dpr_core::{DprError, Result};
use serde::Serialize;

/// Selective patch refinement for small-object detection.
#[derive(Parser, Debug)]
#[command(name = "dpr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset.
    GenerateData(Common),
    /// Train the patch selector.
    TrainSelector(Common),
    /// Train the refiner on patches the selector marks positive.
    TrainRefiner(Common),
    /// Select, refine or enlarge, assemble, detect and score the validation split.
    Infer(Common),
    /// Recompute metrics from the outputs of `infer`.
    Evaluate(Common),
    /// Run inference over the configured thresholds and plot the tradeoff.
    Sweep(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(command: &Command) -> Result<()> {
    match command {
        Command::GenerateData(c) => print(&run_generate_data(&c.resolve()?)?),
        Command::TrainSelector(c) => print(&run_train_selector(&c.resolve()?)?),
        Command::TrainRefiner(c) => print(&run_train_refiner(&c.resolve()?)?),
        Command::Infer(c) => {
            let report = run_infer(&c.resolve()?)?;
            print(&report.metrics)
        }
        Command::Evaluate(c) => print(&run_evaluate(&c.resolve()?)?),
        Command::Sweep(c) => print(&run_sweep(&c.resolve()?)?.rows),
    }
}

fn exit_code(err: &DprError) -> u8 {
    if err.is_config() {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            log::error!("{err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
