//! Marginal sensitivity analysis: worst-case effect bounds when the odds of
//! treatment may differ from the fitted odds by up to a factor `Lambda`.
//!
//! Under the model each control weight may be rescaled by any
//! `c_i in [1/Lambda, Lambda]`, and the control mean is read as the ratio
//! `sum gamma c Y / sum gamma c`. Its extremes over the box are attained at a
//! corner with a single cut in the sorted outcomes, so they are found with
//! one sort and a prefix-sum scan.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::spline::sorted_quantile;
use crate::data::AnalysisSample;
use crate::error::{Error, Result};
use crate::rng::{stream, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityConfig {
    pub lambda_sens: f64,
    pub bootstrap_reps: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self { lambda_sens: 1.0, bootstrap_reps: 1000, confidence: 0.95, seed: 0 }
    }
}

impl SensitivityConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda_sens)?;
        if self.bootstrap_reps == 0 {
            return Err(Error::InvalidArgument("bootstrap_reps must be at least 1".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::InvalidArgument(format!("confidence must be in (0, 1), got {}", self.confidence)));
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 1.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("sensitivity Lambda must be at least 1, got {lambda}")));
    }
    Ok(())
}

/// What the bounds refer to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityTarget {
    Overall,
    Stratum(String),
    /// The `n_1g`-weighted combination of several strata.
    Strata { name: String, labels: Vec<String> },
}

impl fmt::Display for SensitivityTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Overall => write!(f, "overall"),
            Self::Stratum(label) => write!(f, "subgroup:{label}"),
            Self::Strata { name, .. } => write!(f, "{name}"),
        }
    }
}

impl SensitivityTarget {
    fn members(&self, sample: &AnalysisSample) -> Result<Vec<usize>> {
        let lookup = |label: &str| {
            sample
                .stratum_index(label)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown stratum `{label}` in sensitivity target")))
        };
        match self {
            Self::Overall => Ok((0..sample.k()).collect()),
            Self::Stratum(label) => Ok(vec![lookup(label)?]),
            Self::Strata { labels, .. } => {
                let mut out = labels.iter().map(|l| lookup(l)).collect::<Result<Vec<_>>>()?;
                out.sort_unstable();
                out.dedup();
                if out.is_empty() {
                    return Err(Error::InvalidArgument("sensitivity target has no strata".into()));
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityBounds {
    pub target: String,
    #[serde(rename = "lambda")]
    pub lambda_sens: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    /// Percentile bootstrap lower endpoint.
    #[serde(rename = "L")]
    pub lower: Option<f64>,
    /// Percentile bootstrap upper endpoint.
    #[serde(rename = "U")]
    pub upper: Option<f64>,
    #[serde(rename = "B")]
    pub replicates: usize,
    pub dropped_replicates: usize,
}

impl SensitivityBounds {
    /// `max(|L|, |U|)`, falling back to the point bounds when no interval
    /// was computed.
    pub fn bound_width(&self) -> f64 {
        let lo = self.lower.unwrap_or(self.tau_min);
        let hi = self.upper.unwrap_or(self.tau_max);
        lo.abs().max(hi.abs())
    }
}

/// Range of the ratio mean `sum w c y / sum w c` over `c in [1/lambda, lambda]`.
pub fn ratio_mean_range(weights: &[f64], y: &[f64], lambda: f64) -> Result<(f64, f64)> {
    check_lambda(lambda)?;
    if weights.len() != y.len() {
        return Err(Error::Dimension(format!("{} weights for {} outcomes", weights.len(), y.len())));
    }
    if weights.is_empty() {
        return Err(Error::InvalidArgument("empty control set".into()));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidArgument("weights must be nonnegative".into()));
    }
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
    let total_w: f64 = weights.iter().sum();
    let total_wy: f64 = weights.iter().zip(y).map(|(w, v)| w * v).sum();
    if !(total_w > 0.0) {
        return Err(Error::DegenerateStratum("all control weights are zero".into()));
    }
    let lo = 1.0 / lambda;
    let hi = lambda;
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    let mut prefix_w = 0.0;
    let mut prefix_wy = 0.0;
    for cut in 0..=order.len() {
        if cut > 0 {
            let i = order[cut - 1];
            prefix_w += weights[i];
            prefix_wy += weights[i] * y[i];
        }
        let rest_w = total_w - prefix_w;
        let rest_wy = total_wy - prefix_wy;
        // small outcomes down-weighted, large ones up-weighted
        let up = (lo * prefix_wy + hi * rest_wy) / (lo * prefix_w + hi * rest_w);
        let down = (hi * prefix_wy + lo * rest_wy) / (hi * prefix_w + lo * rest_w);
        max = max.max(up);
        min = min.min(down);
    }
    Ok((min, max))
}

fn check_inputs(gamma: &[f64], sample: &AnalysisSample, outcomes: &[f64]) -> Result<()> {
    if gamma.len() != sample.len() || outcomes.len() != sample.len() {
        return Err(Error::Dimension(format!(
            "{} weights and {} outcomes for {} units",
            gamma.len(),
            outcomes.len(),
            sample.len()
        )));
    }
    Ok(())
}

/// Point bounds `[tau_min, tau_max]` from units given by `index`, a map from
/// positions into the original sample.
fn bounds_over(
    gamma: &[f64],
    index: &[usize],
    sample: &AnalysisSample,
    outcomes: &[f64],
    members: &[usize],
    lambda: f64,
) -> Result<(f64, f64)> {
    let k = sample.k();
    let mut treated_sum = vec![0.0; k];
    let mut treated_n = vec![0usize; k];
    let mut control_w = vec![Vec::new(); k];
    let mut control_y = vec![Vec::new(); k];
    for (pos, &i) in index.iter().enumerate() {
        let g = sample.stratum(i);
        if sample.is_treated(i) {
            treated_sum[g] += outcomes[i];
            treated_n[g] += 1;
        } else {
            control_w[g].push(gamma[pos]);
            control_y[g].push(outcomes[i]);
        }
    }
    let n1: usize = members.iter().map(|&g| treated_n[g]).sum();
    if n1 == 0 {
        return Err(Error::InvalidArgument("sensitivity target has no treated units".into()));
    }
    let mut tau_min = 0.0;
    let mut tau_max = 0.0;
    for &g in members {
        let share = treated_n[g] as f64 / n1 as f64;
        let mu1 = treated_sum[g] / treated_n[g] as f64;
        let (lo, hi) = ratio_mean_range(&control_w[g], &control_y[g], lambda).map_err(|e| match e {
            Error::InvalidArgument(m) | Error::DegenerateStratum(m) => {
                Error::DegenerateStratum(format!("stratum `{}`: {m}", sample.labels()[g]))
            }
            other => other,
        })?;
        tau_min += share * (mu1 - hi);
        tau_max += share * (mu1 - lo);
    }
    Ok((tau_min, tau_max))
}

/// Worst-case effect bounds at `lambda` for per-unit weights `gamma`.
pub fn point_bounds(
    gamma: &[f64],
    sample: &AnalysisSample,
    outcomes: &[f64],
    target: &SensitivityTarget,
    lambda: f64,
) -> Result<(f64, f64)> {
    check_inputs(gamma, sample, outcomes)?;
    let members = target.members(sample)?;
    let index: Vec<usize> = (0..sample.len()).collect();
    bounds_over(gamma, &index, sample, outcomes, &members, lambda)
}

/// Point bounds at the configured `Lambda`, without an interval.
pub fn bounds_at_lambda(
    gamma: &[f64],
    sample: &AnalysisSample,
    outcomes: &[f64],
    target: &SensitivityTarget,
    config: &SensitivityConfig,
) -> Result<SensitivityBounds> {
    check_lambda(config.lambda_sens)?;
    let (tau_min, tau_max) = point_bounds(gamma, sample, outcomes, target, config.lambda_sens)?;
    Ok(SensitivityBounds {
        target: target.to_string(),
        lambda_sens: config.lambda_sens,
        tau_min,
        tau_max,
        lower: None,
        upper: None,
        replicates: 0,
        dropped_replicates: 0,
    })
}

/// Weighting procedure re-run on every bootstrap sample. It returns per-unit
/// weights for the sample it is given.
pub type WeightProcedure<'a> = dyn Fn(&AnalysisSample) -> Result<Vec<f64>> + Sync + 'a;

/// Bootstrap samples with their re-solved weights, reusable across `Lambda`.
#[derive(Debug, Clone)]
pub struct BootstrapReplicates {
    /// Per kept replicate: source positions and weights in that order.
    replicates: Vec<(Vec<usize>, Vec<f64>)>,
    total: usize,
    dropped: usize,
}

/// Largest dropped fraction tolerated.
pub const MAX_DROPPED_FRACTION: f64 = 0.1;

impl BootstrapReplicates {
    /// Resamples units with replacement within each stratum x treatment cell
    /// and re-solves the weights. Replicate `b` draws from its own stream, so
    /// the result does not depend on scheduling.
    pub fn draw(procedure: &WeightProcedure, sample: &AnalysisSample, reps: usize, seed: u64) -> Result<Self> {
        use rand::Rng;
        if reps == 0 {
            return Err(Error::InvalidArgument("bootstrap needs at least one replicate".into()));
        }
        let mut cells: Vec<Vec<usize>> = vec![Vec::new(); 2 * sample.k()];
        for i in 0..sample.len() {
            cells[2 * sample.stratum(i) + usize::from(sample.is_treated(i))].push(i);
        }
        let results: Vec<Option<(Vec<usize>, Vec<f64>)>> = (0..reps)
            .into_par_iter()
            .map(|b| {
                let mut rng = stream(seed, b as u64, Stage::Bootstrap);
                let mut index: Vec<usize> = Vec::with_capacity(sample.len());
                for cell in &cells {
                    for _ in 0..cell.len() {
                        index.push(cell[rng.random_range(0..cell.len())]);
                    }
                }
                index.sort_unstable();
                let resampled = sample.subset(&index).ok()?;
                let gamma = procedure(&resampled).ok()?;
                if gamma.len() != index.len() || gamma.iter().any(|w| !w.is_finite()) {
                    return None;
                }
                Some((index, gamma))
            })
            .collect();
        let dropped = results.iter().filter(|r| r.is_none()).count();
        if dropped as f64 > MAX_DROPPED_FRACTION * reps as f64 {
            return Err(Error::Bootstrap { dropped, total: reps });
        }
        Ok(Self { replicates: results.into_iter().flatten().collect(), total: reps, dropped })
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }

    /// Per-replicate point bounds at `lambda`.
    pub fn replicate_bounds(
        &self,
        sample: &AnalysisSample,
        outcomes: &[f64],
        target: &SensitivityTarget,
        lambda: f64,
    ) -> Result<Vec<(f64, f64)>> {
        let members = target.members(sample)?;
        self.replicates
            .par_iter()
            .map(|(index, gamma)| bounds_over(gamma, index, sample, outcomes, &members, lambda))
            .collect()
    }

    /// Percentile interval `[L, U]` at `lambda`.
    pub fn interval(
        &self,
        sample: &AnalysisSample,
        outcomes: &[f64],
        target: &SensitivityTarget,
        lambda: f64,
        confidence: f64,
    ) -> Result<(f64, f64)> {
        if outcomes.len() != sample.len() {
            return Err(Error::Dimension(format!("{} outcomes for {} units", outcomes.len(), sample.len())));
        }
        let bounds = self.replicate_bounds(sample, outcomes, target, lambda)?;
        let mut mins: Vec<f64> = bounds.iter().map(|b| b.0).collect();
        let mut maxs: Vec<f64> = bounds.iter().map(|b| b.1).collect();
        mins.sort_by(|a, b| a.total_cmp(b));
        maxs.sort_by(|a, b| a.total_cmp(b));
        let alpha = (1.0 - confidence) / 2.0;
        Ok((sorted_quantile(&mins, alpha), sorted_quantile(&maxs, 1.0 - alpha)))
    }
}

/// Point bounds on the full sample plus the percentile bootstrap interval.
pub fn bootstrap_ci(
    procedure: &WeightProcedure,
    sample: &AnalysisSample,
    outcomes: &[f64],
    target: &SensitivityTarget,
    config: &SensitivityConfig,
) -> Result<SensitivityBounds> {
    config.validate()?;
    let gamma = procedure(sample)?;
    let mut bounds = bounds_at_lambda(&gamma, sample, outcomes, target, config)?;
    let reps = BootstrapReplicates::draw(procedure, sample, config.bootstrap_reps, config.seed)?;
    let (lower, upper) = reps.interval(sample, outcomes, target, config.lambda_sens, config.confidence)?;
    bounds.lower = Some(lower);
    bounds.upper = Some(upper);
    bounds.replicates = reps.total();
    bounds.dropped_replicates = reps.dropped();
    Ok(bounds)
}

/// Bounds on the difference of two targets' effects:
/// `[L_a - U_b, U_a - L_b]`.
pub fn difference_bounds(a: &SensitivityBounds, b: &SensitivityBounds) -> Result<SensitivityBounds> {
    if (a.lambda_sens - b.lambda_sens).abs() > 1e-12 * a.lambda_sens.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "bounds computed at different Lambda ({} and {})",
            a.lambda_sens, b.lambda_sens
        )));
    }
    let lower = a.lower.zip(b.upper).map(|(l, u)| l - u);
    let upper = a.upper.zip(b.lower).map(|(u, l)| u - l);
    Ok(SensitivityBounds {
        target: format!("{} - {}", a.target, b.target),
        lambda_sens: a.lambda_sens,
        tau_min: a.tau_min - b.tau_max,
        tau_max: a.tau_max - b.tau_min,
        lower,
        upper,
        replicates: a.replicates.min(b.replicates),
        dropped_replicates: a.dropped_replicates.max(b.dropped_replicates),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    /// Largest grid `Lambda` whose lower bound stays positive, or 1.
    pub lambda: f64,
    /// Whether the lower bound is positive at `Lambda = 1`.
    pub significant: bool,
    /// Whether the lower bound is still positive at the end of the grid.
    pub censored: bool,
    /// `(Lambda, L)` pairs evaluated by the search.
    pub evaluated: Vec<(f64, f64)>,
}

/// Largest `Lambda` on an ascending `grid` whose bootstrap lower bound is
/// positive. The lower bound is nonincreasing in `Lambda`, so the grid is
/// bisected.
pub fn breakdown_lambda(
    replicates: &BootstrapReplicates,
    sample: &AnalysisSample,
    outcomes: &[f64],
    target: &SensitivityTarget,
    grid: &[f64],
    confidence: f64,
) -> Result<Breakdown> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("Lambda grid is empty".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("Lambda grid must be strictly ascending".into()));
    }
    for &l in grid {
        check_lambda(l)?;
    }
    let mut evaluated = Vec::new();
    let mut lower_at = |lambda: f64| -> Result<f64> {
        let (l, _) = replicates.interval(sample, outcomes, target, lambda, confidence)?;
        evaluated.push((lambda, l));
        Ok(l)
    };
    if lower_at(1.0)? <= 0.0 {
        return Ok(Breakdown { lambda: 1.0, significant: false, censored: false, evaluated });
    }
    let last = grid.len() - 1;
    if lower_at(grid[last])? > 0.0 {
        return Ok(Breakdown { lambda: grid[last], significant: true, censored: true, evaluated });
    }
    // invariant: L(grid[lo]) > 0 (or lo is "before the grid"), L(grid[hi]) <= 0
    let mut lo: Option<usize> = None;
    let mut hi = last;
    loop {
        let start = lo.map_or(0, |l| l + 1);
        if start >= hi {
            break;
        }
        let mid = start + (hi - start) / 2;
        if lower_at(grid[mid])? > 0.0 {
            lo = Some(mid);
        } else {
            hi = mid;
        }
    }
    let lambda = lo.map_or(1.0, |i| grid[i].max(1.0));
    Ok(Breakdown { lambda, significant: true, censored: false, evaluated })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplificationPoint {
    pub delta: f64,
    pub coefficient: f64,
}

/// Outcome coefficient an unobserved confounder with imbalance `delta` would
/// need to produce an error as large as `bound_width`.
pub fn amplification_curve(bound_width: f64, deltas: &[f64]) -> Result<Vec<AmplificationPoint>> {
    if !(bound_width > 0.0 && bound_width.is_finite()) {
        return Err(Error::InvalidArgument(format!("bound width must be positive, got {bound_width}")));
    }
    deltas
        .iter()
        .map(|&delta| {
            if !(delta > 0.0 && delta.is_finite()) {
                return Err(Error::InvalidArgument(format!("imbalance must be positive, got {delta}")));
            }
            Ok(AmplificationPoint { delta, coefficient: bound_width / delta })
        })
        .collect()
}
