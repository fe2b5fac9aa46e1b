//! Approximate balancing weights solved through the Lagrangian dual.
//!
//! See [`problem`] for the primal/dual pair. The dual is piecewise quadratic
//! and continuously differentiable, so it is minimized with a damped
//! semismooth Newton method whose linear systems have block-arrow structure
//! (per-stratum blocks coupled through the global slope).

mod problem;

use serde::{Deserialize, Serialize};

use crate::data::{AnalysisSample, FeatureMatrix};
use crate::diagnostics::kish_ess;
use crate::error::{Error, Result};
use problem::Problem;


/// How strongly stratum slopes are tied to the global slope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Local imbalance penalized, exact global balance.
    Partial,
    /// Local imbalance ignored, exact global balance (stable balancing weights).
    Full,
    /// Local imbalance penalized, no global constraint.
    None,
}

impl std::str::FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "partial" => Ok(Self::Partial),
            "full" => Ok(Self::Full),
            "none" => Ok(Self::None),
            other => Err(Error::InvalidArgument(format!("unknown pooling `{other}`"))),
        }
    }
}

/// Maps the common `lambda` to per-stratum `lambda_g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaScheme {
    /// `lambda / n_g` with `n_g` the stratum size.
    StratumSize,
    /// `lambda / n_1g`.
    TreatedCount,
    /// `lambda` for every stratum.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub lambda: f64,
    pub pooling: Pooling,
    pub lambda_scheme: LambdaScheme,
    pub max_iterations: usize,
    /// Relative stopping tolerance on the dual gradient norm.
    pub gradient_tolerance: f64,
    /// Largest allowed per-feature global mean difference.
    pub global_balance_tolerance: f64,
    /// Imbalance allowance of the stable-balancing-weights special case. Only
    /// `0` is solved; full pooling is that case.
    pub sbw_delta: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            pooling: Pooling::Partial,
            lambda_scheme: LambdaScheme::StratumSize,
            max_iterations: 500,
            gradient_tolerance: 1e-8,
            global_balance_tolerance: 1e-6,
            sbw_delta: 0.0,
        }
    }
}

impl SolverConfig {
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_pooling(mut self, pooling: Pooling) -> Self {
        self.pooling = pooling;
        self
    }

    pub fn with_scheme(mut self, scheme: LambdaScheme) -> Self {
        self.lambda_scheme = scheme;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.gradient_tolerance > 0.0) || !(self.global_balance_tolerance > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        if !(self.sbw_delta >= 0.0) {
            return Err(Error::InvalidArgument("sbw_delta must be nonnegative".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Dual variables: stratum intercepts, stratum slopes, and the global slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
}

impl DualParams {
    pub fn zeros(k: usize, p: usize) -> Self {
        Self { alpha: vec![0.0; k], beta: vec![vec![0.0; p]; k], mu: vec![0.0; p] }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.alpha.iter().chain(self.beta.iter().flatten()).chain(self.mu.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.alpha.iter_mut().chain(self.beta.iter_mut().flatten()).chain(self.mu.iter_mut())
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.values().zip(other.values()).map(|(a, b)| a * b).sum()
    }

    /// `self + t * dir`.
    pub fn step(&self, dir: &Self, t: f64) -> Self {
        let mut out = self.clone();
        for (o, d) in out.values_mut().zip(dir.values()) {
            *o += t * d;
        }
        out
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.values_mut().for_each(|v| *v *= c);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    /// Inverse of [`DualParams::flatten`] for the given shape.
    pub fn unflatten(values: &[f64], k: usize, p: usize) -> Result<Self> {
        if values.len() != k + k * p + p {
            return Err(Error::Dimension(format!("{} values for {k} strata and {p} features", values.len())));
        }
        let mut out = Self::zeros(k, p);
        for (o, v) in out.values_mut().zip(values) {
            *o = *v;
        }
        Ok(out)
    }
}

/// Balancing weights with their certificates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSolution {
    /// One entry per sample unit. Controls carry their weight; treated units
    /// carry 1.
    pub gamma: Vec<f64>,
    pub dual: DualParams,
    pub lambda_g: Vec<f64>,
    pub pooling: Pooling,
    pub primal_value: f64,
    pub dual_value: f64,
    /// Signed global mean difference per feature, divided by `n_1`.
    pub global_imbalance: Vec<f64>,
    /// Signed local mean difference per stratum and feature, divided by `n_1g`.
    pub local_imbalance: Vec<Vec<f64>>,
    pub gradient_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Why the solve is not converged, when it is not.
    pub diagnostic: Option<String>,
}

impl WeightSolution {
    /// Sum of squared local imbalance, `sum_g |E_g|^2`, in sum units.
    pub fn local_objective(&self, sample: &AnalysisSample) -> f64 {
        self.local_imbalance
            .iter()
            .zip(sample.counts())
            .map(|(e, c)| {
                let n1 = c.treated as f64;
                e.iter().map(|v| (v * n1) * (v * n1)).sum::<f64>()
            })
            .sum()
    }

    pub fn global_imbalance_norm(&self) -> f64 {
        self.global_imbalance.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Control weights only, in sample order.
    pub fn control_weights(&self, sample: &AnalysisSample) -> Vec<f64> {
        (0..sample.len()).filter(|&i| !sample.is_treated(i)).map(|i| self.gamma[i]).collect()
    }
}

/// Canonical dual objective.
pub fn dual_objective(
    params: &DualParams,
    features: &FeatureMatrix,
    sample: &AnalysisSample,
    config: &SolverConfig,
) -> Result<f64> {
    let problem = Problem::new(features, sample, config)?;
    problem.check_shape(params)?;
    Ok(problem.objective(params))
}

/// Exact gradient of [`dual_objective`]. Under full pooling the slope
/// gradient is reported on `mu` (stratum rows are zero); under no pooling
/// the `mu` gradient is zero.
pub fn dual_gradient(
    params: &DualParams,
    features: &FeatureMatrix,
    sample: &AnalysisSample,
    config: &SolverConfig,
) -> Result<DualParams> {
    let problem = Problem::new(features, sample, config)?;
    problem.check_shape(params)?;
    Ok(problem.gradient(params))
}

/// Absolute tolerance on each per-stratum weight sum.
const SUM_TOLERANCE: f64 = 1e-8;

/// Canonical primal value of `gamma` (one entry per unit), after checking
/// the constraints.
pub fn primal_objective(
    gamma: &[f64],
    features: &FeatureMatrix,
    sample: &AnalysisSample,
    config: &SolverConfig,
) -> Result<f64> {
    let problem = Problem::new(features, sample, config)?;
    if gamma.len() != sample.len() {
        return Err(Error::Dimension(format!("{} weights for {} units", gamma.len(), sample.len())));
    }
    let mut violations = Vec::new();
    for i in sample.control_indices() {
        if !(gamma[i] >= 0.0) {
            violations.push(format!("gamma[{i}] = {} is negative", gamma[i]));
        }
    }
    for (g, s) in problem.strata.iter().enumerate() {
        let sum: f64 = s.controls.iter().map(|&i| gamma[i]).sum();
        if (sum - s.n_treated).abs() > SUM_TOLERANCE * s.n_treated.max(1.0) {
            violations.push(format!(
                "stratum `{}` weights sum to {sum}, expected {}",
                sample.labels()[g],
                s.n_treated
            ));
        }
    }
    if config.pooling != Pooling::None {
        let global = global_imbalance(&problem, gamma);
        for (j, v) in global.iter().enumerate() {
            if v.abs() > config.global_balance_tolerance {
                violations.push(format!("global balance on feature {j} off by {v:.3e}"));
            }
        }
    }
    if !violations.is_empty() {
        return Err(Error::Constraint(violations.join("; ")));
    }
    Ok(problem.primal_value(gamma))
}

fn global_imbalance(problem: &Problem, gamma: &[f64]) -> Vec<f64> {
    let mut total = vec![0.0; problem.p];
    for e in problem.local_imbalance_sums(gamma) {
        for (t, v) in total.iter_mut().zip(e) {
            *t += v;
        }
    }
    total.iter().map(|v| v / problem.n_treated).collect()
}

const STALL_ITERATIONS: usize = 30;
const STALL_GROWTH: f64 = 1e6;

/// Minimizes the dual from a zero start and recovers the weights.

pub fn solve(features: &FeatureMatrix, sample: &AnalysisSample, config: &SolverConfig) -> Result<WeightSolution> {
    solve_from(features, sample, config, None)
}

/// Like [`solve`] but starting from `start` when given.
pub fn solve_from(
    features: &FeatureMatrix,
    sample: &AnalysisSample,
    config: &SolverConfig,
    start: Option<&DualParams>,
) -> Result<WeightSolution> {
    let problem = Problem::new(features, sample, config)?;
    let (k, p) = (problem.k(), problem.p);
    let mut x = match start {
        Some(s) => {
            problem.check_shape(s)?;
            s.clone()
        }
        None => DualParams::zeros(k, p),
    };
    normalize_pooling(&problem, &mut x);

    let scale = problem.curvature_scale();
    let lambda_max = problem.strata.iter().map(|s| s.lambda).fold(0.0, f64::max);
    let divergence_bound = 1e10 * (1.0 + lambda_max) * (1.0 + sample.len() as f64);

    // Stopping is relative to the gradient at zero, whose entries are the
    // treated counts and feature sums. A bound relative to |dual value| would
    // be met spuriously while an infeasible dual runs off to -infinity.
    let reference = 1.0 + problem.gradient(&DualParams::zeros(k, p)).norm();
    let tolerance = config.gradient_tolerance * reference;

    let mut value = problem.objective(&x);
    let mut grad = problem.gradient(&x);
    let mut gnorm = grad.norm();
    let mut iterations = 0;
    let mut met_tolerance = gnorm <= tolerance;
    let mut polish = 0;
    // Levenberg-style damping: shrinks after full Newton steps, grows after
    // backtracking. Along a recession direction of an infeasible problem the
    // curvature vanishes, so shrinking damping makes the divergence fast.
    let mut damping_factor = 1e-6;
    // An infeasible dual drifts linearly along a recession direction: the
    // gradient stalls at a nonzero value while the iterate keeps growing.
    let mut best_gnorm = gnorm;
    let mut best_iteration = 0;
    let mut size_at_best = x.max_abs();

    while iterations < config.max_iterations {
        if met_tolerance {
            // a few extra Newton steps tighten the constraint residuals
            if polish >= 3 || gnorm <= 1e-14 * reference {
                break;
            }
            polish += 1;
        }
        iterations += 1;
        let damping = damping_factor * scale;
        let dir = match problem.newton_direction(&x, &grad, damping) {
            Ok(d) if d.is_finite() && grad.dot(&d) < 0.0 => d,
            _ => grad.scaled(-1.0 / scale),
        };
        let slope = grad.dot(&dir);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..80 {
            let mut trial = x.step(&dir, t);
            normalize_pooling(&problem, &mut trial);
            let v = problem.objective(&trial);
            if !v.is_finite() {
                return Err(Error::Numeric(format!("dual objective became {v}")));
            }
            if v <= value + 1e-4 * t * slope {
                accepted = Some((trial, v));
                break;
            }
            t *= 0.5;
        }
        damping_factor = if t == 1.0 { (damping_factor * 0.1).max(1e-14) } else { (damping_factor * 10.0).min(1.0) };
        let (next, next_value) = match accepted {
            Some(a) => a,
            None => {
                // roundoff can defeat Armijo near the optimum; accept a full
                // step only if it reduces the gradient
                let mut trial = x.step(&dir, 1.0);
                normalize_pooling(&problem, &mut trial);
                let g = problem.gradient(&trial);
                if g.norm() < gnorm {
                    let v = problem.objective(&trial);
                    (trial, v)
                } else {
                    break;
                }
            }
        };
        x = next;
        value = next_value;
        grad = problem.gradient(&x);
        gnorm = grad.norm();
        let size = x.max_abs();
        if gnorm < 0.5 * best_gnorm {
            best_gnorm = gnorm;
            best_iteration = iterations;
            size_at_best = size;
        }
        let stalled = !met_tolerance && iterations - best_iteration >= STALL_ITERATIONS && size > STALL_GROWTH * (1.0 + size_at_best);
        if stalled || size > divergence_bound || value < -1e300 {
            return Err(infeasibility(&x, features, config.pooling));
        }
        if !met_tolerance {
            met_tolerance = gnorm <= tolerance;
        }
    }

    let gamma = problem.recover_weights(&x, sample.len());
    let local_sums = problem.local_imbalance_sums(&gamma);
    let global = global_imbalance(&problem, &gamma);
    let local: Vec<Vec<f64>> = local_sums
        .iter()
        .zip(&problem.strata)
        .map(|(e, s)| e.iter().map(|v| v / s.n_treated).collect())
        .collect();
    let primal_value = problem.primal_value(&gamma);

    let worst_global = global.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut diagnostic = None;
    if !met_tolerance {
        diagnostic = Some(format!(
            "gradient norm {gnorm:.3e} above tolerance after {iterations} iterations"
        ));
    } else if config.pooling != Pooling::None && worst_global > config.global_balance_tolerance {
        let j = global.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).map(|(j, _)| j).unwrap_or(0);
        diagnostic = Some(format!(
            "global imbalance {worst_global:.3e} on feature `{}` exceeds tolerance {:.1e}",
            features.names()[j],
            config.global_balance_tolerance
        ));
    }

    Ok(WeightSolution {
        gamma,
        dual: x,
        lambda_g: problem.strata.iter().map(|s| s.lambda).collect(),
        pooling: config.pooling,
        primal_value,
        dual_value: value,
        global_imbalance: global,
        local_imbalance: local,
        gradient_norm: gnorm,
        converged: diagnostic.is_none(),
        iterations,
        diagnostic,
    })
}

fn normalize_pooling(problem: &Problem, x: &mut DualParams) {
    match problem.pooling {
        Pooling::Full => {
            for b in &mut x.beta {
                b.copy_from_slice(&x.mu);
            }
        }
        Pooling::None => x.mu.iter_mut().for_each(|m| *m = 0.0),
        Pooling::Partial => {}
    }
}

fn infeasibility(x: &DualParams, features: &FeatureMatrix, pooling: Pooling) -> Error {
    // the diverging direction is dominated by the global slope
    let direction = match pooling {
        Pooling::None => x.beta.iter().fold(vec![0.0; x.mu.len()], |mut acc, b| {
            acc.iter_mut().zip(b).for_each(|(a, v)| *a += v.abs());
            acc
        }),
        _ => x.mu.clone(),
    };
    let index = direction
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(j, _)| j)
        .unwrap_or(0);
    Error::Infeasible { feature: features.names().get(index).cloned().unwrap_or_default(), index }
}

/// One point of a lambda sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    /// `sqrt(sum_g |E_g|^2)`.
    pub local_imbalance: f64,
    /// Euclidean norm of the global mean difference.
    pub global_imbalance: f64,
    /// Kish effective sample size of all control weights.
    pub ess: f64,
    pub converged: bool,
}

/// Solves along an ascending `grid` of lambda values, warm-starting each
/// solve from the previous dual rescaled so the weights are unchanged.
pub fn sweep_lambda(
    features: &FeatureMatrix,
    sample: &AnalysisSample,
    base: &SolverConfig,
    grid: &[f64],
) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("lambda grid is empty".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("lambda grid must be strictly ascending".into()));
    }
    let mut out = Vec::with_capacity(grid.len());
    let mut previous: Option<(f64, DualParams)> = None;
    for &lambda in grid {
        let config = base.clone().with_lambda(lambda);
        let start = previous.as_ref().map(|(l, d)| d.scaled(lambda / l));
        let sol = solve_from(features, sample, &config, start.as_ref())?;
        out.push(SweepPoint {
            lambda,
            local_imbalance: sol.local_objective(sample).sqrt(),
            global_imbalance: sol.global_imbalance_norm(),
            ess: kish_ess(&sol.control_weights(sample)),
            converged: sol.converged,
        });
        previous = Some((lambda, sol.dual));
    }
    Ok(out)
}
