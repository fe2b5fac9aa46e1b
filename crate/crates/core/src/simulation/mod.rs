//! Monte Carlo comparison of subgroup effect estimators on synthetic data.

mod dgp;
mod metrics;

pub use dgp::{
    assign_groups, base_spectrum, column_transform, gen_covariates, gen_treatment_and_outcomes, random_orthogonal,
    unit_effect, Covariates, DgpDraw, DgpParameters, DICHOTOMIZED, EXPONENTIATED,
};
pub use metrics::{summarize, EstimatorSummary, Metrics, COVERAGE_Z};

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_features, AnalysisSample, FeatureSpec, UnitRecord};
use crate::error::{Error, Result};
use crate::estimators::{
    augment, fit_outcome_ridge, fit_propensity, ipw_weights, outcome_model_estimates, weighted_means, EstimateTable,
    IpwNormalization, PropensityConfig, PropensityMode, RidgeConfig, DEFAULT_PENALTY_GRID,
};
use crate::rng::{stream, Stage};
use crate::solver::{solve, LambdaScheme, Pooling, SolverConfig};

/// Estimators the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    PartialPooling,
    Augmented,
    FullPooling,
    NoPooling,
    IpwFullInteraction,
    IpwFixedEffects,
    RidgeOutcome,
    /// Returns the true effects; used to check the metric bookkeeping.
    Oracle,
}

impl Estimator {
    pub const ROSTER: [Estimator; 7] = [
        Self::PartialPooling,
        Self::Augmented,
        Self::FullPooling,
        Self::NoPooling,
        Self::IpwFullInteraction,
        Self::IpwFixedEffects,
        Self::RidgeOutcome,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::PartialPooling => "partial_pooling",
            Self::Augmented => "augmented",
            Self::FullPooling => "full_pooling",
            Self::NoPooling => "no_pooling",
            Self::IpwFullInteraction => "ipw_full_interaction",
            Self::IpwFixedEffects => "ipw_fixed_effects",
            Self::RidgeOutcome => "ridge_outcome",
            Self::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ROSTER
            .iter()
            .chain(std::iter::once(&Self::Oracle))
            .find(|e| e.name() == s)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown estimator `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub d: usize,
    pub groups: usize,
    pub replicates: usize,
    pub seed: u64,
    pub roster: Vec<Estimator>,
    /// Feed the raw covariates, not the transformed ones, to the treatment
    /// and outcome models.
    pub raw_models: bool,
    pub penalty_grid: Vec<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 10_000,
            d: 50,
            groups: 10,
            replicates: 500,
            seed: 0,
            roster: Estimator::ROSTER.to_vec(),
            raw_models: false,
            penalty_grid: DEFAULT_PENALTY_GRID.to_vec(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 3 || self.n <= self.d {
            return Err(Error::InvalidArgument(format!("need n > d >= 3, got n = {}, d = {}", self.n, self.d)));
        }
        if self.groups < 2 {
            return Err(Error::InvalidArgument("need at least 2 groups".into()));
        }
        if self.replicates == 0 {
            return Err(Error::InvalidArgument("need at least one replicate".into()));
        }
        if self.roster.is_empty() {
            return Err(Error::InvalidArgument("estimator roster is empty".into()));
        }
        if self.penalty_grid.is_empty() {
            return Err(Error::InvalidArgument("penalty grid is empty".into()));
        }
        Ok(())
    }
}

/// One replicate's data as the estimators see it, plus the truth.
pub struct SimulatedStudy {
    pub draw: DgpDraw,
    pub sample: AnalysisSample,
    pub outcomes: Vec<f64>,
    /// Sample effect on the treated per retained stratum.
    pub true_tau: Vec<f64>,
    pub true_overall: f64,
    /// Groups removed because one arm was empty.
    pub dropped_groups: Vec<String>,
}

pub fn group_label(g: usize, groups: usize) -> String {
    let width = (groups - 1).to_string().len();
    format!("g{g:0width$}")
}

/// Draws replicate `index` of `config`.
pub fn simulate_study(config: &SimConfig, index: u64) -> Result<SimulatedStudy> {
    let mut rng = stream(config.seed, index, Stage::Covariates);
    let covariates = gen_covariates(config.n, config.d, &mut rng)?;
    let last: Vec<f64> = covariates.raw.column(config.d - 1).iter().copied().collect();
    let groups = assign_groups(&last, config.groups, &mut stream(config.seed, index, Stage::Groups))?;
    let params = DgpParameters::draw(config.groups, config.d, &mut stream(config.seed, index, Stage::Parameters));
    let model_x = if config.raw_models { covariates.raw.clone() } else { covariates.transformed.clone() };
    let draw = gen_treatment_and_outcomes(
        covariates,
        &model_x,
        groups,
        params,
        &mut stream(config.seed, index, Stage::Treatment),
        &mut stream(config.seed, index, Stage::Noise),
        1.0,
    )?;
    let observed = draw.observed();

    let mut arms = vec![[0usize; 2]; config.groups];
    for (g, &t) in draw.groups.iter().zip(&draw.treated) {
        arms[*g][usize::from(t)] += 1;
    }
    let keep: Vec<bool> = arms.iter().map(|a| a[0] > 0 && a[1] > 0).collect();
    let dropped_groups =
        (0..config.groups).filter(|&g| !keep[g]).map(|g| group_label(g, config.groups)).collect();
    let names = (1..=config.d).map(|j| format!("x{j}")).collect();
    let units: Vec<UnitRecord> = (0..config.n)
        .filter(|&i| keep[draw.groups[i]])
        .map(|i| UnitRecord {
            row: i,
            outcome: Some(observed[i]),
            treated: draw.treated[i],
            subgroup: group_label(draw.groups[i], config.groups),
            covariates: draw.covariates.transformed.row(i).iter().copied().collect(),
        })
        .collect();
    let sample = AnalysisSample::from_units(units, names)?;
    let outcomes = sample.outcomes().expect("simulated outcomes present");

    let mut true_tau = vec![0.0; sample.k()];
    let mut total = 0.0;
    for (pos, u) in sample.units().iter().enumerate() {
        if u.treated {
            true_tau[sample.stratum(pos)] += draw.tau[u.row];
            total += draw.tau[u.row];
        }
    }
    for (t, c) in true_tau.iter_mut().zip(sample.counts()) {
        *t /= c.treated as f64;
    }
    let true_overall = total / sample.n_treated() as f64;
    Ok(SimulatedStudy { draw, sample, outcomes, true_tau, true_overall, dropped_groups })
}

/// One estimator's output on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub estimator: Estimator,
    pub tau: Vec<f64>,
    pub se: Vec<f64>,
    pub overall: f64,
    pub overall_se: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub index: usize,
    pub groups: Vec<String>,
    pub dropped_groups: Vec<String>,
    pub true_tau: Vec<f64>,
    pub true_overall: f64,
    pub estimates: Vec<EstimateRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub config: SimConfig,
    pub summaries: Vec<EstimatorSummary>,
    pub replicates: Vec<ReplicateRecord>,
}

fn balancing(study: &SimulatedStudy, features: &crate::data::FeatureMatrix, pooling: Pooling) -> Result<Vec<f64>> {
    // lambda_g = 1 / n_1g
    let config = SolverConfig::default().with_lambda(1.0).with_pooling(pooling).with_scheme(LambdaScheme::TreatedCount);
    let sol = solve(features, &study.sample, &config)?;
    if !sol.converged {
        return Err(Error::NonConvergence { iterations: sol.iterations, gradient_norm: sol.gradient_norm });
    }
    Ok(sol.gamma)
}

fn record(estimator: Estimator, result: std::result::Result<EstimateTable, String>) -> EstimateRecord {
    match result {
        Ok(t) => EstimateRecord {
            estimator,
            tau: t.taus(),
            se: t.subgroups.iter().map(|s| s.se).collect(),
            overall: t.overall.tau,
            overall_se: t.overall.se,
            error: None,
        },
        Err(e) => EstimateRecord {
            estimator,
            tau: Vec::new(),
            se: Vec::new(),
            overall: f64::NAN,
            overall_se: f64::NAN,
            error: Some(e),
        },
    }
}

/// Runs every estimator of the roster on one replicate.
pub fn run_replicate(config: &SimConfig, index: usize) -> Result<ReplicateRecord> {
    let study = simulate_study(config, index as u64)?;
    let features = build_features(&study.sample, &FeatureSpec::default())?;
    let sample = &study.sample;
    let y = &study.outcomes;
    let cv_seed = config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64);

    let needs_partial = config.roster.iter().any(|e| matches!(e, Estimator::PartialPooling | Estimator::Augmented));
    let needs_ridge = config.roster.iter().any(|e| matches!(e, Estimator::Augmented | Estimator::RidgeOutcome));
    let partial = needs_partial.then(|| balancing(&study, &features, Pooling::Partial).map_err(|e| e.to_string()));
    let ridge = needs_ridge.then(|| {
        let rc = RidgeConfig { penalty_grid: config.penalty_grid.clone(), folds: 5, seed: cv_seed };
        fit_outcome_ridge(&features, sample, y, &rc).map_err(|e| e.to_string())
    });

    let mut estimates = Vec::with_capacity(config.roster.len());
    for &est in &config.roster {
        let result = match est {
            Estimator::PartialPooling => match partial.as_ref().expect("computed") {
                Ok(g) => weighted_means(g, sample, y).map_err(|e| e.to_string()),
                Err(e) => Err(e.clone()),
            },
            Estimator::Augmented => match (partial.as_ref().expect("computed"), ridge.as_ref().expect("computed")) {
                (Ok(g), Ok(m)) => augment(g, m, &features, sample, y).map_err(|e| e.to_string()),
                (Err(e), _) | (_, Err(e)) => Err(e.clone()),
            },
            Estimator::FullPooling => {
                balancing(&study, &features, Pooling::Full)
                    .and_then(|g| weighted_means(&g, sample, y))
                    .map_err(|e| e.to_string())
            }
            Estimator::NoPooling => {
                balancing(&study, &features, Pooling::None)
                    .and_then(|g| weighted_means(&g, sample, y))
                    .map_err(|e| e.to_string())
            }
            Estimator::IpwFullInteraction | Estimator::IpwFixedEffects => {
                let mode = if est == Estimator::IpwFullInteraction {
                    PropensityMode::FullInteraction
                } else {
                    PropensityMode::FixedEffects
                };
                let pc = PropensityConfig {
                    mode,
                    penalty_grid: config.penalty_grid.clone(),
                    seed: cv_seed,
                    ..PropensityConfig::default()
                };
                fit_propensity(&features, sample, &pc)
                    .and_then(|m| ipw_weights(&m, &features, sample, IpwNormalization::Hajek))
                    .and_then(|w| weighted_means(&w.gamma, sample, y))
                    .map_err(|e| e.to_string())
            }
            Estimator::RidgeOutcome => match ridge.as_ref().expect("computed") {
                Ok(m) => outcome_model_estimates(m, &features, sample, y).map_err(|e| e.to_string()),
                Err(e) => Err(e.clone()),
            },
            Estimator::Oracle => {
                let mu1 = crate::estimators::stratum_means(&vec![0.0; sample.len()], sample, y).map(|m| m.0);
                mu1.and_then(|mu1| {
                    let mu0: Vec<f64> = mu1.iter().zip(&study.true_tau).map(|(a, t)| a - t).collect();
                    let mut t = EstimateTable::new(sample, &mu1, &mu0, &vec![0.0; sample.k()])?;
                    // report the truth exactly rather than through mu1 - mu0
                    for (s, &tau) in t.subgroups.iter_mut().zip(&study.true_tau) {
                        s.tau = tau;
                    }
                    t.overall.tau = study.true_overall;
                    Ok(t)
                })
                .map_err(|e| e.to_string())
            }
        };
        estimates.push(record(est, result));
    }
    Ok(ReplicateRecord {
        index,
        groups: sample.labels().to_vec(),
        dropped_groups: study.dropped_groups,
        true_tau: study.true_tau,
        true_overall: study.true_overall,
        estimates,
    })
}

/// Runs all replicates (in parallel, deterministically) and summarizes.
pub fn run_monte_carlo(config: &SimConfig) -> Result<SimResult> {
    config.validate()?;
    let replicates: Vec<ReplicateRecord> =
        (0..config.replicates).into_par_iter().map(|j| run_replicate(config, j)).collect::<Result<_>>()?;
    let summaries = summarize(&config.roster, &replicates);
    Ok(SimResult { config: config.clone(), summaries, replicates })
}

impl SimResult {
    /// Tidy `estimator,metric,value` table.
    pub fn metrics_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["estimator", "metric", "value"])?;
        for s in &self.summaries {
            let pairs = s.metrics.as_ref().map(|m| m.pairs()).unwrap_or_default();
            for (metric, value) in pairs {
                let v = value.map_or_else(|| "NA".to_string(), |v| format!("{v}"));
                w.write_record([s.estimator.name(), metric, v.as_str()])?;
            }
            w.write_record([s.estimator.name(), "successes", s.successes.to_string().as_str()])?;
            w.write_record([s.estimator.name(), "failures", s.failures.to_string().as_str()])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
    }

    /// Per-replicate `replicate,estimator,group,estimate,truth,se` dump;
    /// the overall effect uses group `overall`.
    pub fn replicates_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["replicate", "estimator", "group", "estimate", "truth", "se"])?;
        for r in &self.replicates {
            for e in &r.estimates {
                if e.error.is_some() {
                    continue;
                }
                let rows = r
                    .groups
                    .iter()
                    .zip(e.tau.iter().zip(&e.se).zip(&r.true_tau))
                    .map(|(g, ((t, s), truth))| (g.as_str(), *t, *truth, *s))
                    .chain(std::iter::once(("overall", e.overall, r.true_overall, e.overall_se)));
                for (g, t, truth, s) in rows {
                    w.write_record([
                        r.index.to_string(),
                        e.estimator.name().to_string(),
                        g.to_string(),
                        format!("{t}"),
                        format!("{truth}"),
                        format!("{s}"),
                    ])?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
    }
}
