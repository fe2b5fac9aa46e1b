use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use subgroup_balance::data::{
    build_features, load_csv, load_design_csv, AnalysisSample, DroppedStratum, FeatureMatrix, FeatureSpec, Grouping,
    Schema,
};
use subgroup_balance::diagnostics::{overlap_report, solution_balance};
use subgroup_balance::estimators::{
    augment, fit_outcome_ridge, fit_propensity, ipw_weights, linear_regression_baseline, outcome_model_estimates,
    weighted_means, EstimateTable, IpwNormalization, PropensityConfig, PropensityMode, RegressionInteraction,
    RidgeConfig, DEFAULT_PENALTY_GRID,
};
use subgroup_balance::sensitivity::{
    breakdown_lambda, point_bounds, BootstrapReplicates, Breakdown, SensitivityBounds, SensitivityTarget,
};
use subgroup_balance::simulation::{run_monte_carlo, Estimator, SimConfig};
use subgroup_balance::solver::{solve, sweep_lambda, SolverConfig, WeightSolution};
use subgroup_balance::Error;

use crate::output::OutputDir;
use crate::{Augment, DataArgs, EstimateArgs, Method, SensitivityArgs, SimulateArgs, SolverArgs, SweepArgs, WeightsArgs};

/// A solve that stopped without meeting its tolerances.
#[derive(Debug)]
struct NotConverged(String);

impl fmt::Display for NotConverged {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "weights did not converge: {}", self.0)
    }
}

impl std::error::Error for NotConverged {}

/// 2 for infeasible or non-converged weights, 1 otherwise.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<NotConverged>().is_some() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Infeasible { .. } | Error::NonConvergence { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

fn load_schema(data: &DataArgs) -> Result<Schema> {
    if !data.input.is_file() {
        bail!("input file {} does not exist", data.input.display());
    }
    match &data.schema {
        Some(p) => Ok(Schema::from_json_file(p)?),
        None => Ok(Schema::default()),
    }
}

fn load_feature_spec(data: &DataArgs) -> Result<FeatureSpec> {
    match &data.features {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("invalid feature spec {}", p.display()))
        }
        None => Ok(FeatureSpec::default()),
    }
}

fn solver_config(args: &SolverArgs) -> SolverConfig {
    let mut config = SolverConfig::default()
        .with_lambda(args.lambda)
        .with_pooling(args.pooling.into())
        .with_scheme(args.lambda_scheme.into());
    config.max_iterations = args.max_iterations;
    config
}

fn converged(solution: &WeightSolution) -> Result<()> {
    if solution.converged {
        Ok(())
    } else {
        let why = solution.diagnostic.clone().unwrap_or_else(|| "tolerance not met".into());
        Err(NotConverged(why).into())
    }
}

/// Design-only load: the outcome column is never parsed.
fn load_design(data: &DataArgs) -> Result<(AnalysisSample, FeatureMatrix)> {
    let schema = load_schema(data)?;
    let sample = load_design_csv(&data.input, &schema.design_only())?;
    let features = build_features(&sample, &load_feature_spec(data)?)?;
    Ok((sample, features))
}

fn load_with_outcomes(data: &DataArgs) -> Result<(AnalysisSample, FeatureMatrix, Vec<f64>)> {
    let schema = load_schema(data)?;
    if schema.outcome.is_none() {
        bail!("the schema names no outcome column");
    }
    let sample = load_csv(&data.input, &schema)?;
    let outcomes = sample.outcomes().context("outcome column missing")?;
    let features = build_features(&sample, &load_feature_spec(data)?)?;
    Ok((sample, features, outcomes))
}

/// `weights.json`: the solution plus enough of the sample layout to line the
/// weights up with the input rows again.
#[derive(Debug, Serialize, Deserialize)]
struct WeightsFile {
    /// Zero-based data row of each weight.
    rows: Vec<usize>,
    subgroup: Vec<String>,
    treated: Vec<bool>,
    features: Vec<String>,
    dropped_strata: Vec<DroppedStratum>,
    solution: WeightSolution,
}

fn weights_csv(sample: &AnalysisSample, gamma: &[f64]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["row", "subgroup", "treated", "gamma"])?;
    for (u, g) in sample.units().iter().zip(gamma) {
        w.write_record([u.row.to_string(), u.subgroup.clone(), u8::from(u.treated).to_string(), format!("{g}")])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn weights(args: &WeightsArgs) -> Result<()> {
    let (sample, features) = load_design(&args.data)?;
    let solution = solve(&features, &sample, &solver_config(&args.solver))?;
    let balance = solution_balance(&solution, &features, &sample)?;
    let out = OutputDir::create(&args.out)?;
    out.text("weights.csv", &weights_csv(&sample, &solution.gamma)?)?;
    let file = WeightsFile {
        rows: sample.units().iter().map(|u| u.row).collect(),
        subgroup: sample.units().iter().map(|u| u.subgroup.clone()).collect(),
        treated: sample.units().iter().map(|u| u.treated).collect(),
        features: features.names(),
        dropped_strata: sample.dropped().to_vec(),
        solution,
    };
    out.json("weights.json", &file)?;
    out.json("balance.json", &balance)?;
    if file.solution.converged {
        out.json("overlap.json", &overlap_report(&file.solution.gamma, &sample, args.weight_threshold)?)?;
    }
    out.manifest("weights", None, args)?;
    converged(&file.solution)
}

fn read_weights(path: &Path, sample: &AnalysisSample) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let file: WeightsFile = serde_json::from_str(&text).with_context(|| format!("invalid weights file {}", path.display()))?;
    let rows: Vec<usize> = sample.units().iter().map(|u| u.row).collect();
    let treated: Vec<bool> = sample.units().iter().map(|u| u.treated).collect();
    if file.rows != rows || file.treated != treated || file.solution.gamma.len() != rows.len() {
        bail!("{} was computed for a different sample", path.display());
    }
    converged(&file.solution)?;
    Ok(file.solution.gamma)
}

fn penalty_grid(args: &EstimateArgs) -> Vec<f64> {
    args.penalty_grid.clone().unwrap_or_else(|| DEFAULT_PENALTY_GRID.to_vec())
}

fn ridge_config(args: &EstimateArgs) -> RidgeConfig {
    RidgeConfig { penalty_grid: penalty_grid(args), folds: args.folds, seed: args.seed }
}

pub fn estimate(args: &EstimateArgs) -> Result<()> {
    let (sample, features, y) = load_with_outcomes(&args.data)?;
    let gamma = match args.method {
        Method::Weighting => Some(match &args.weights {
            Some(p) => read_weights(p, &sample)?,
            None => {
                let solution = solve(&features, &sample, &solver_config(&args.solver))?;
                converged(&solution)?;
                solution.gamma
            }
        }),
        Method::Ipw | Method::IpwFixedEffects => {
            let mode = if args.method == Method::Ipw { PropensityMode::FullInteraction } else { PropensityMode::FixedEffects };
            let config = PropensityConfig {
                penalty_grid: penalty_grid(args),
                folds: args.folds,
                seed: args.seed,
                ..PropensityConfig::default().with_mode(mode)
            };
            let model = fit_propensity(&features, &sample, &config)?;
            Some(ipw_weights(&model, &features, &sample, IpwNormalization::Hajek)?.gamma)
        }
        Method::Ridge | Method::Regression => None,
    };
    let mut table: EstimateTable = match (gamma, args.augment) {
        (Some(g), Augment::None) => weighted_means(&g, &sample, &y)?,
        (Some(g), Augment::Ridge) => {
            let model = fit_outcome_ridge(&features, &sample, &y, &ridge_config(args))?;
            augment(&g, &model, &features, &sample, &y)?
        }
        (None, Augment::Ridge) => bail!("--augment applies only to weighting methods"),
        (None, Augment::None) if args.method == Method::Ridge => {
            let model = fit_outcome_ridge(&features, &sample, &y, &ridge_config(args))?;
            outcome_model_estimates(&model, &features, &sample, &y)?
        }
        (None, Augment::None) => linear_regression_baseline(&features, &sample, &y, RegressionInteraction::None)?,
    };
    for path in &args.grouping {
        let grouping = Grouping::from_csv(path)?;
        table.aggregate(&grouping, &sample)?;
    }
    let out = OutputDir::create(&args.out)?;
    out.text("estimates.csv", &table.to_csv_string()?)?;
    out.text("estimates.json", &(table.to_json_string()? + "\n"))?;
    out.manifest("estimate", Some(args.seed), args)?;
    Ok(())
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let (sample, features) = load_design(&args.data)?;
    let points = sweep_lambda(&features, &sample, &solver_config(&args.solver), &args.grid)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in &points {
        w.serialize(p)?;
    }
    let out = OutputDir::create(&args.out)?;
    out.text("sweep.csv", &String::from_utf8(w.into_inner()?)?)?;
    out.json("sweep.json", &points)?;
    out.manifest("sweep", None, args)?;
    Ok(())
}

fn parse_target(s: &str) -> Result<SensitivityTarget> {
    match s {
        "overall" => Ok(SensitivityTarget::Overall),
        _ => match s.strip_prefix("subgroup:") {
            Some(label) if !label.is_empty() => Ok(SensitivityTarget::Stratum(label.to_string())),
            _ => bail!("target must be `overall` or `subgroup:<label>`, got `{s}`"),
        },
    }
}

#[derive(Serialize)]
struct SensitivityReport {
    bounds: Vec<SensitivityBounds>,
    breakdown: Vec<(String, Breakdown)>,
}

pub fn sensitivity(args: &SensitivityArgs) -> Result<()> {
    let (sample, _, y) = load_with_outcomes(&args.data)?;
    let spec = load_feature_spec(&args.data)?;
    let config = solver_config(&args.solver);
    let targets = args.target.iter().map(|t| parse_target(t)).collect::<Result<Vec<_>>>()?;
    if !(args.confidence > 0.0 && args.confidence < 1.0) {
        bail!("confidence must be in (0, 1)");
    }

    // weights are re-solved on every bootstrap sample, features included
    let procedure = |s: &AnalysisSample| -> subgroup_balance::Result<Vec<f64>> {
        let features = build_features(s, &spec)?;
        let solution = solve(&features, s, &config)?;
        if !solution.converged {
            return Err(Error::NonConvergence { iterations: solution.iterations, gradient_norm: solution.gradient_norm });
        }
        Ok(solution.gamma)
    };
    let gamma = procedure(&sample)?;
    let replicates = if args.bootstrap > 0 {
        Some(BootstrapReplicates::draw(&procedure, &sample, args.bootstrap, args.seed)?)
    } else {
        None
    };

    let mut bounds = Vec::new();
    let mut breakdown = Vec::new();
    for target in &targets {
        for &lambda in &args.sens_lambda {
            let (tau_min, tau_max) = point_bounds(&gamma, &sample, &y, target, lambda)?;
            let interval = match &replicates {
                Some(r) => Some(r.interval(&sample, &y, target, lambda, args.confidence)?),
                None => None,
            };
            bounds.push(SensitivityBounds {
                target: target.to_string(),
                lambda_sens: lambda,
                tau_min,
                tau_max,
                lower: interval.map(|i| i.0),
                upper: interval.map(|i| i.1),
                replicates: replicates.as_ref().map_or(0, |r| r.total()),
                dropped_replicates: replicates.as_ref().map_or(0, |r| r.dropped()),
            });
        }
        if let (Some(grid), Some(r)) = (&args.breakdown_grid, &replicates) {
            breakdown.push((target.to_string(), breakdown_lambda(r, &sample, &y, target, grid, args.confidence)?));
        }
    }
    if args.breakdown_grid.is_some() && replicates.is_none() {
        bail!("--breakdown-grid needs bootstrap replicates");
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["target", "lambda", "tau_min", "tau_max", "L", "U", "B", "dropped"])?;
    let na = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v}"));
    for b in &bounds {
        w.write_record([
            b.target.clone(),
            format!("{}", b.lambda_sens),
            format!("{}", b.tau_min),
            format!("{}", b.tau_max),
            na(b.lower),
            na(b.upper),
            b.replicates.to_string(),
            b.dropped_replicates.to_string(),
        ])?;
    }
    let out = OutputDir::create(&args.out)?;
    out.text("sensitivity.csv", &String::from_utf8(w.into_inner()?)?)?;
    out.json("sensitivity.json", &SensitivityReport { bounds, breakdown })?;
    out.manifest("sensitivity", Some(args.seed), args)?;
    Ok(())
}

#[derive(Serialize)]
struct Failure<'a> {
    replicate: usize,
    estimator: &'a str,
    error: &'a str,
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let roster = match &args.roster {
        Some(names) => names.iter().map(|n| n.trim().parse::<Estimator>()).collect::<Result<Vec<_>, _>>()?,
        None => Estimator::ROSTER.to_vec(),
    };
    let config = SimConfig {
        n: args.n,
        d: args.d,
        groups: args.groups,
        replicates: args.replicates,
        seed: args.seed,
        roster,
        raw_models: args.raw_models,
        ..SimConfig::default()
    };
    let result = run_monte_carlo(&config)?;
    let mut failures = Vec::new();
    for r in &result.replicates {
        for e in &r.estimates {
            if let Some(msg) = &e.error {
                failures.push(Failure { replicate: r.index, estimator: e.estimator.name(), error: msg });
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for f in &failures {
        w.serialize(f)?;
    }
    if failures.is_empty() {
        w.write_record(["replicate", "estimator", "error"])?;
    }
    let out = OutputDir::create(&args.out)?;
    out.text("metrics.csv", &result.metrics_csv()?)?;
    out.text("replicates.csv", &result.replicates_csv()?)?;
    out.text("failures.csv", &String::from_utf8(w.into_inner()?)?)?;
    out.json("summary.json", &result.summaries)?;
    out.manifest("simulate", Some(args.seed), &config)?;
    Ok(())
}
