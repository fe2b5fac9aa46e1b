//! `subgroup-balance`: batch front end for the balancing-weights library.
//!
//! Every command reads CSV and writes JSON/CSV plus a `manifest.json` into
//! `--out`. Exit codes: 0 ok, 1 usage or I/O error, 2 infeasible or
//! non-converged weights.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use subgroup_balance::solver::{LambdaScheme, Pooling};

#[derive(Debug, Parser)]
#[command(name = "subgroup-balance", version, about = "Partially pooled balancing weights for subgroup effects")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve for balancing weights. Never reads the outcome column.
    Weights(WeightsArgs),
    /// Subgroup and overall effect estimates.
    Estimate(EstimateArgs),
    /// Local imbalance, global imbalance and ESS along a lambda grid.
    Sweep(SweepArgs),
    /// Worst-case bounds and bootstrap intervals under unmeasured confounding.
    Sensitivity(SensitivityArgs),
    /// Monte Carlo benchmark on synthetic data.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    input: PathBuf,
    /// JSON column-role map: {"outcome", "treatment", "subgroup", "covariates"}.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// JSON feature spec (splines, interactions, standardization).
    #[arg(long)]
    features: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum PoolingArg {
    Partial,
    Full,
    None,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Partial => Pooling::Partial,
            PoolingArg::Full => Pooling::Full,
            PoolingArg::None => Pooling::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SchemeArg {
    StratumSize,
    TreatedCount,
    Constant,
}

impl From<SchemeArg> for LambdaScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::StratumSize => LambdaScheme::StratumSize,
            SchemeArg::TreatedCount => LambdaScheme::TreatedCount,
            SchemeArg::Constant => LambdaScheme::Constant,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct SolverArgs {
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, value_enum, default_value_t = PoolingArg::Partial)]
    pooling: PoolingArg,
    /// How lambda is scaled per stratum.
    #[arg(long, value_enum, default_value_t = SchemeArg::StratumSize)]
    lambda_scheme: SchemeArg,
    #[arg(long, default_value_t = 500)]
    max_iterations: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
struct WeightsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Normalized-weight threshold for the overlap report.
    #[arg(long, default_value_t = subgroup_balance::diagnostics::DEFAULT_WEIGHT_THRESHOLD)]
    weight_threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Method {
    /// Balancing weights (from `--weights` or solved inline).
    Weighting,
    /// Hajek IPW with a fully interacted logistic propensity model.
    Ipw,
    /// Hajek IPW with stratum intercepts and a common slope.
    IpwFixedEffects,
    /// Ridge outcome model fit on the controls.
    Ridge,
    /// Linear regression with treatment-by-stratum effects.
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Augment {
    None,
    Ridge,
}

#[derive(Debug, Clone, Args, Serialize)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, value_enum, default_value_t = Method::Weighting)]
    method: Method,
    /// `weights.json` written by the `weights` command; solves inline when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Augment::None)]
    augment: Augment,
    /// Two-column `stratum,group` CSV; repeat for several aggregation levels.
    #[arg(long)]
    grouping: Vec<PathBuf>,
    /// Ridge / propensity penalty grid for cross-validation.
    #[arg(long, value_delimiter = ',')]
    penalty_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = subgroup_balance::estimators::DEFAULT_FOLDS)]
    folds: usize,
    /// Seed for cross-validation folds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Ascending lambda values.
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct SensitivityArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Sensitivity parameters Lambda >= 1.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    sens_lambda: Vec<f64>,
    /// Bootstrap replicates; 0 reports point bounds only.
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0.95)]
    confidence: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `overall` or `subgroup:<label>`; repeatable.
    #[arg(long, default_value = "overall")]
    target: Vec<String>,
    /// Ascending Lambda grid searched for the breakdown value.
    #[arg(long, value_delimiter = ',')]
    breakdown_grid: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct SimulateArgs {
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 50)]
    d: usize,
    #[arg(long, default_value_t = 10)]
    groups: usize,
    #[arg(long, default_value_t = 500)]
    replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated estimator names; default is the full roster.
    #[arg(long, value_delimiter = ',')]
    roster: Option<Vec<String>>,
    /// Fit the propensity and outcome models on the raw covariates.
    #[arg(long)]
    raw_models: bool,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Weights(a) => commands::weights(a),
        Command::Estimate(a) => commands::estimate(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Sensitivity(a) => commands::sensitivity(a),
        Command::Simulate(a) => commands::simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
