mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kanbench::layers::ArchKind;
use kanbench::nn::ActivationKind;

/// Budget-matched KAN and MLP experiments.
#[derive(Parser, Debug)]
#[command(name = "kanbench", version)]
pub struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file; overrides the config's `out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Master seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parameter counts per layer, closed-form and exact.
    Params(ArchArgs),
    /// Closed-form FLOPs per layer and an instrumented count.
    Flops(ArchArgs),
    /// Train one configuration and write its record.
    Train,
    /// Train every point of the config's sweep.
    Sweep,
    /// Pareto envelope of a results file as CSV.
    Envelope(EnvelopeArgs),
    /// Class-incremental training and forgetting metrics.
    Cl,
}

#[derive(Args, Debug, Clone)]
pub struct ArchArgs {
    #[arg(long, value_parser = parse_kind)]
    pub kind: Option<ArchKind>,
    /// Layer widths, comma separated, input first.
    #[arg(long, value_delimiter = ',')]
    pub widths: Vec<usize>,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub order: Option<usize>,
    /// Spline range as `lo,hi`.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub range: Vec<f64>,
    #[arg(long, value_parser = parse_activation)]
    pub activation: Option<ActivationKind>,
    #[arg(long)]
    pub use_norm: bool,
    #[arg(long)]
    pub nonlinear_first: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricChoice {
    Best,
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BudgetChoice {
    Params,
    ParamsExact,
    Flops,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OrientationChoice {
    Max,
    Min,
}

#[derive(Args, Debug)]
pub struct EnvelopeArgs {
    /// Results JSONL written by `train` or `sweep`.
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long, value_enum, default_value_t = MetricChoice::Best)]
    pub metric: MetricChoice,
    #[arg(long, value_enum, default_value_t = BudgetChoice::Params)]
    pub budget: BudgetChoice,
    /// Defaults to `max` for accuracy and `min` for RMSE.
    #[arg(long, value_enum)]
    pub orientation: Option<OrientationChoice>,
}

fn parse_kind(s: &str) -> Result<ArchKind, String> {
    s.parse().map_err(|e: kanbench::Error| e.to_string())
}

fn parse_activation(s: &str) -> Result<ActivationKind, String> {
    s.parse().map_err(|e: kanbench::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
