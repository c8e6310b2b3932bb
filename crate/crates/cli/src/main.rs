//! `fleetdesign`: batch runs of the reward-design pipeline.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fleetdesign::EvalMode;

#[derive(Parser, Debug)]
#[command(name = "fleetdesign", version, about = "Reward design for fleet repositioning")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory. Relative paths are resolved under $FLEETDESIGN_OUTPUT_ROOT when set.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse trip and turnstile CSVs into a demand tensor and baseline counts.
    Ingest(IngestArgs),
    /// Train drivers under one reward design and evaluate the result.
    Train(TrainArgs),
    /// Search the design parameter with Bayesian optimization.
    Optimize(OptimizeArgs),
    /// Evaluate a saved policy.
    Evaluate(EvaluateArgs),
    /// Closed-form equilibrium table of the 2x2 service-charge case.
    Oracle(OracleArgs),
    /// Turn a finished run directory into plot-ready CSV files.
    Report(ReportArgs),
}

#[derive(Args, Debug, Default, Clone)]
pub struct DesignArgs {
    /// Preset name (two-driver, service-charge-2x2, synthetic-city) or scenario file.
    #[arg(long)]
    pub scenario: Option<String>,
    /// none, service-charge, toll or flat-deduction.
    #[arg(long)]
    pub design: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Grids charged by a flat deduction.
    #[arg(long, value_delimiter = ',')]
    pub grids: Option<Vec<usize>>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct EvalArgs {
    /// Evaluation episodes.
    #[arg(long)]
    pub eval_episodes: Option<usize>,
    #[arg(long)]
    pub eval_seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    pub eval_mode: Option<EvalMode>,
    /// Objective weight `w`.
    #[arg(long)]
    pub w: Option<f64>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct HyperArgs {
    /// default, two-by-two, two-driver or city.
    #[arg(long)]
    pub hyper: Option<String>,
    /// Training episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub trips: Option<PathBuf>,
    #[arg(long)]
    pub turnstile: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub design: DesignArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub design: DesignArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long)]
    pub lo: Option<f64>,
    #[arg(long)]
    pub hi: Option<f64>,
    /// Total evaluations, initial design included.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Objective weights to sweep, e.g. `--sweep-w 0.2,0.5,0.8`.
    #[arg(long, value_delimiter = ',')]
    pub sweep_w: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Policy checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub design: DesignArgs,
    #[command(flatten)]
    pub eval: EvalArgs,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    /// Service-charge levels; defaults to 0, 0.06 and 0.58.
    #[arg(long, value_delimiter = ',')]
    pub alpha: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory of a finished train, evaluate or optimize run.
    pub run: PathBuf,
}

fn parse_mode(s: &str) -> Result<EvalMode, String> {
    match s {
        "greedy" => Ok(EvalMode::Greedy),
        "stochastic" => Ok(EvalMode::Stochastic),
        _ => Err(format!("expected greedy or stochastic, got {s:?}")),
    }
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
    let result = config::RunConfig::load(cli.config.as_deref())
        .map_err(commands::Failure::Invalid)
        .and_then(|file| {
            let out = cli.out.as_deref();
            match cli.command {
                Command::Ingest(a) => commands::ingest(&file, &a, out),
                Command::Train(a) => commands::train(&file, &a, out),
                Command::Optimize(a) => commands::optimize(&file, &a, out),
                Command::Evaluate(a) => commands::evaluate(&file, &a, out),
                Command::Oracle(a) => commands::oracle(&file, &a, out),
                Command::Report(a) => commands::report(&a, out),
            }
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(commands::Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
