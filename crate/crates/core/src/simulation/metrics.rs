//! Bias, RMSE and coverage across Monte Carlo replicates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Estimator, ReplicateRecord};

/// Two-sided 95% normal quantile.
pub const COVERAGE_Z: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `(1/G) sum_g |mean_j (tau_hat_gj - tau_gj)|`.
    pub subgroup_mab: f64,
    /// `sqrt(mean_{j,g} (tau_hat_gj - tau_gj)^2)`.
    pub subgroup_rmse: f64,
    pub overall_abs_bias: f64,
    pub overall_rmse: f64,
    /// Share of subgroup intervals covering the truth; `None` when no
    /// estimate has a positive standard error.
    pub subgroup_coverage: Option<f64>,
    pub overall_coverage: Option<f64>,
}

impl Metrics {
    pub fn pairs(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("subgroup_mab", Some(self.subgroup_mab)),
            ("subgroup_rmse", Some(self.subgroup_rmse)),
            ("overall_abs_bias", Some(self.overall_abs_bias)),
            ("overall_rmse", Some(self.overall_rmse)),
            ("subgroup_coverage", self.subgroup_coverage),
            ("overall_coverage", self.overall_coverage),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub successes: usize,
    pub failures: usize,
    /// `None` when every replicate failed.
    pub metrics: Option<Metrics>,
}

fn covers(estimate: f64, se: f64, truth: f64) -> Option<bool> {
    (se > 0.0).then(|| (estimate - truth).abs() <= COVERAGE_Z * se)
}

fn share(hits: &[bool]) -> Option<f64> {
    (!hits.is_empty()).then(|| hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

pub fn summarize(roster: &[Estimator], replicates: &[ReplicateRecord]) -> Vec<EstimatorSummary> {
    roster
        .iter()
        .map(|&est| {
            let mut successes = 0;
            let mut failures = 0;
            // per group label: sum of errors and count
            let mut by_group: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
            let mut sq_sum = 0.0;
            let mut sq_count = 0usize;
            let mut overall_err = 0.0;
            let mut overall_sq = 0.0;
            let mut sub_hits = Vec::new();
            let mut overall_hits = Vec::new();
            for r in replicates {
                let Some(e) = r.estimates.iter().find(|e| e.estimator == est) else {
                    continue;
                };
                if e.error.is_some() {
                    failures += 1;
                    continue;
                }
                successes += 1;
                for (g, label) in r.groups.iter().enumerate() {
                    let err = e.tau[g] - r.true_tau[g];
                    let entry = by_group.entry(label.as_str()).or_insert((0.0, 0));
                    entry.0 += err;
                    entry.1 += 1;
                    sq_sum += err * err;
                    sq_count += 1;
                    if let Some(h) = covers(e.tau[g], e.se[g], r.true_tau[g]) {
                        sub_hits.push(h);
                    }
                }
                let err = e.overall - r.true_overall;
                overall_err += err;
                overall_sq += err * err;
                if let Some(h) = covers(e.overall, e.overall_se, r.true_overall) {
                    overall_hits.push(h);
                }
            }
            let metrics = (successes > 0).then(|| Metrics {
                subgroup_mab: by_group.values().map(|(s, c)| (s / *c as f64).abs()).sum::<f64>()
                    / by_group.len() as f64,
                subgroup_rmse: (sq_sum / sq_count as f64).sqrt(),
                overall_abs_bias: (overall_err / successes as f64).abs(),
                overall_rmse: (overall_sq / successes as f64).sqrt(),
                subgroup_coverage: share(&sub_hits),
                overall_coverage: share(&overall_hits),
            });
            EstimatorSummary { estimator: est, successes, failures, metrics }
        })
        .collect()
}
