//! Ridge-penalized logistic propensity models and inverse propensity weights.

use serde::{Deserialize, Serialize};

use super::design::{
    cross_validate, select_penalty, stratified_folds, validate_grid, CvPoint, Design, LinearCoefficients,
    SlopeStructure, DEFAULT_FOLDS, DEFAULT_PENALTY_GRID,
};
use crate::data::{AnalysisSample, FeatureMatrix};
use crate::diagnostics::{balance_report, BalanceReport};
use crate::error::{Error, Result};
use crate::rng::{stream, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityMode {
    /// Separate slope per stratum, written as a shared slope plus deviation.
    FullInteraction,
    /// Stratum intercepts with one common slope.
    FixedEffects,
}

impl PropensityMode {
    fn structure(self) -> SlopeStructure {
        match self {
            Self::FullInteraction => SlopeStructure::Interacted,
            Self::FixedEffects => SlopeStructure::Shared,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityConfig {
    pub mode: PropensityMode,
    pub penalty_grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        Self {
            mode: PropensityMode::FullInteraction,
            penalty_grid: DEFAULT_PENALTY_GRID.to_vec(),
            folds: DEFAULT_FOLDS,
            seed: 0,
            max_iterations: 100,
            gradient_tolerance: 1e-8,
        }
    }
}

impl PropensityConfig {
    pub fn with_mode(mut self, mode: PropensityMode) -> Self {
        self.mode = mode;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub mode: PropensityMode,
    pub penalty: f64,
    pub coefficients: LinearCoefficients,
    pub cv: Vec<CvPoint>,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl PropensityModel {
    pub fn linear_predictor(&self, row: &[f64], stratum: usize) -> f64 {
        self.coefficients.predict(row, stratum)
    }

    pub fn probability(&self, row: &[f64], stratum: usize) -> f64 {
        sigmoid(self.linear_predictor(row, stratum))
    }
}

pub fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^eta) - y eta`.
fn log_loss(eta: f64, treated: bool) -> f64 {
    let softplus = eta.max(0.0) + (-eta.abs()).exp().ln_1p();
    if treated {
        softplus - eta
    } else {
        softplus
    }
}

struct LogisticFit {
    coefficients: LinearCoefficients,
    iterations: usize,
    gradient_norm: f64,
}

fn fit_logistic(design: &Design, y: &[bool], penalty: f64, config: &PropensityConfig) -> Result<LogisticFit> {
    let objective = |c: &LinearCoefficients| -> f64 {
        let eta = design.linear_predictors(c);
        eta.iter().zip(y).map(|(&e, &t)| log_loss(e, t)).sum::<f64>() + 0.5 * penalty * c.penalized_norm_sq()
    };
    // gradient of the objective, penalty * P theta - score(y - p), and the probabilities
    let gradient = |c: &LinearCoefficients| -> (LinearCoefficients, Vec<f64>) {
        let prob: Vec<f64> = design.linear_predictors(c).iter().map(|&e| sigmoid(e)).collect();
        let resid: Vec<f64> = prob.iter().zip(y).map(|(p, &t)| if t { 1.0 - p } else { -p }).collect();
        let zero = LinearCoefficients::zeros(design.structure, design.k, design.p());
        let neg_score = zero.axpy(-1.0, &design.score(&resid));
        let mut grad = neg_score.axpy(penalty, c);
        grad.intercepts = neg_score.intercepts;
        (grad, prob)
    };
    let mut theta = LinearCoefficients::zeros(design.structure, design.k, design.p());
    let mut value = objective(&theta);
    let mut gnorm = f64::INFINITY;
    for iteration in 0..=config.max_iterations {
        let (grad, prob) = gradient(&theta);
        let resid: Vec<f64> = prob.iter().zip(y).map(|(p, &t)| if t { 1.0 - p } else { -p }).collect();
        gnorm = grad.norm();
        if gnorm <= config.gradient_tolerance {
            return Ok(LogisticFit { coefficients: theta, iterations: iteration, gradient_norm: gnorm });
        }
        if iteration == config.max_iterations {
            break;
        }
        let w: Vec<f64> = prob.iter().map(|p| (p * (1.0 - p)).max(1e-12)).collect();
        let dir = design.solve(&w, &resid, penalty, Some(&theta))?;
        let slope = dir_dot(&dir, &grad);
        if slope.abs() <= 1e-10 * (1.0 + value.abs()) {
            // the objective change is below roundoff; accept the full step
            // when it reduces the gradient
            let trial = theta.axpy(1.0, &dir);
            if gradient(&trial).0.norm() >= gnorm {
                break;
            }
            value = objective(&trial);
            theta = trial;
        } else {
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..60 {
                let trial = theta.axpy(t, &dir);
                let v = objective(&trial);
                if v.is_finite() && v <= value + 1e-4 * t * slope {
                    theta = trial;
                    value = v;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
        if !theta.is_finite() {
            return Err(Error::Numeric("logistic coefficients diverged".into()));
        }
    }
    Err(Error::NonConvergence { iterations: config.max_iterations, gradient_norm: gnorm })
}

fn dir_dot(a: &LinearCoefficients, b: &LinearCoefficients) -> f64 {
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>();
    dot(&a.intercepts, &b.intercepts)
        + dot(&a.shared, &b.shared)
        + a.deviations.iter().zip(&b.deviations).map(|(x, y)| dot(x, y)).sum::<f64>()
}

fn all_units_design<'a>(features: &'a FeatureMatrix, sample: &AnalysisSample, mode: PropensityMode) -> Design<'a> {
    let rows: Vec<usize> = (0..sample.len()).collect();
    let strata = rows.iter().map(|&i| sample.stratum(i)).collect();
    Design { x: features.values(), rows, strata, k: sample.k(), structure: mode.structure() }
}

fn check_classes(features: &FeatureMatrix, sample: &AnalysisSample) -> Result<()> {
    if features.nrows() != sample.len() {
        return Err(Error::Dimension(format!("{} feature rows for {} units", features.nrows(), sample.len())));
    }
    if sample.n_treated() < 2 || sample.n_control() < 2 {
        return Err(Error::InvalidArgument(format!(
            "propensity model needs at least 2 units per class, got {} treated and {} control",
            sample.n_treated(),
            sample.n_control()
        )));
    }
    Ok(())
}

/// Fits at a fixed penalty.
pub fn fit_propensity_at(
    features: &FeatureMatrix,
    sample: &AnalysisSample,
    penalty: f64,
    config: &PropensityConfig,
) -> Result<PropensityModel> {
    check_classes(features, sample)?;
    let design = all_units_design(features, sample, config.mode);
    let y: Vec<bool> = (0..sample.len()).map(|i| sample.is_treated(i)).collect();
    let fit = fit_logistic(&design, &y, penalty, config)?;
    Ok(PropensityModel {
        mode: config.mode,
        penalty,
        coefficients: fit.coefficients,
        cv: Vec::new(),
        iterations: fit.iterations,
        gradient_norm: fit.gradient_norm,
    })
}

/// Fits with the penalty chosen by cross-validated log-loss.
pub fn fit_propensity(features: &FeatureMatrix, sample: &AnalysisSample, config: &PropensityConfig) -> Result<PropensityModel> {
    check_classes(features, sample)?;
    validate_grid(&config.penalty_grid, config.folds)?;
    if config.penalty_grid.len() == 1 {
        return fit_propensity_at(features, sample, config.penalty_grid[0], config);
    }
    let design = all_units_design(features, sample, config.mode);
    let y: Vec<bool> = (0..sample.len()).map(|i| sample.is_treated(i)).collect();
    let mut rng = stream(config.seed, 1, Stage::CrossValidation);
    // fold within stratum x treatment so every training fold keeps both classes
    let cells: Vec<usize> = (0..y.len()).map(|r| 2 * design.strata[r] + usize::from(y[r])).collect();
    let folds = stratified_folds(&cells, 2 * design.k, config.folds, &mut rng);
    let cv = cross_validate(
        &design.strata,
        design.k,
        &config.penalty_grid,
        &folds,
        config.folds,
        |train, penalty| {
            let sub = Design {
                x: design.x,
                rows: train.iter().map(|&r| design.rows[r]).collect(),
                strata: train.iter().map(|&r| design.strata[r]).collect(),
                k: design.k,
                structure: design.structure,
            };
            let ys: Vec<bool> = train.iter().map(|&r| y[r]).collect();
            fit_logistic(&sub, &ys, penalty, config).map(|f| f.coefficients)
        },
        |coefs, r| log_loss(coefs.predict(&design.row(r), design.strata[r]), y[r]),
    )?;
    let penalty = select_penalty(&cv);
    let mut model = fit_propensity_at(features, sample, penalty, config)?;
    model.cv = cv;
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IpwNormalization {
    /// Rescale so control weights sum to `n_1g` in every stratum.
    Hajek,
    /// Raw odds `e / (1 - e)`.
    Odds,
}

/// Inverse propensity weights in the same per-unit layout as balancing
/// weights (treated units carry 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpwWeights {
    pub gamma: Vec<f64>,
    pub normalization: IpwNormalization,
    pub balance: BalanceReport,
}

/// Odds weight `e / (1 - e)` for a control with propensity `e`.
pub fn odds_weight(e: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&e) {
        return Err(Error::Overlap(format!("estimated propensity {e} on a control unit")));
    }
    Ok(e / (1.0 - e))
}

pub fn ipw_weights(
    model: &PropensityModel,
    features: &FeatureMatrix,
    sample: &AnalysisSample,
    normalization: IpwNormalization,
) -> Result<IpwWeights> {
    if features.nrows() != sample.len() {
        return Err(Error::Dimension(format!("{} feature rows for {} units", features.nrows(), sample.len())));
    }
    let mut gamma = vec![1.0; sample.len()];
    let mut sums = vec![0.0; sample.k()];
    for i in sample.control_indices() {
        let g = sample.stratum(i);
        let e = model.probability(&features.row(i), g);
        gamma[i] = odds_weight(e).map_err(|err| match err {
            Error::Overlap(m) => Error::Overlap(format!("row {}: {m}", sample.units()[i].row)),
            other => other,
        })?;
        sums[g] += gamma[i];
    }
    if normalization == IpwNormalization::Hajek {
        for (g, s) in sums.iter().enumerate() {
            if !(*s > 0.0) {
                return Err(Error::Overlap(format!("all control odds vanish in stratum `{}`", sample.labels()[g])));
            }
        }
        for i in sample.control_indices() {
            let g = sample.stratum(i);
            gamma[i] *= sample.counts()[g].treated as f64 / sums[g];
        }
    }
    let balance = balance_report(&gamma, features, sample)?;
    Ok(IpwWeights { gamma, normalization, balance })
}
