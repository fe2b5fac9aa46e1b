//! Subgroup and aggregate effect estimates.

use serde::{Deserialize, Serialize};

use crate::data::{AnalysisSample, Grouping};
use crate::error::{Error, Result};

/// Estimates for one stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupEstimate {
    pub group: String,
    pub n_treated: usize,
    pub mu1: f64,
    pub mu0: f64,
    pub tau: f64,
    pub se: f64,
    /// Bias correction added to `mu0` by augmentation, if any.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bias_correction: Option<f64>,
}

/// Estimates for one level of a grouping, or the overall effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateEstimate {
    pub level: String,
    pub group: String,
    pub n_treated: usize,
    pub mu1: f64,
    pub mu0: f64,
    pub tau: f64,
    pub se: f64,
}

/// One row of the long-format export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub level: String,
    pub group: String,
    pub mu1: f64,
    pub mu0: f64,
    pub tau: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateTable {
    pub subgroups: Vec<SubgroupEstimate>,
    pub aggregates: Vec<AggregateEstimate>,
    pub overall: AggregateEstimate,
    /// Covariance of the subgroup effects. `None` means independent subgroups
    /// with variances `se^2`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tau_covariance: Option<Vec<Vec<f64>>>,
}

pub const SUBGROUP_LEVEL: &str = "subgroup";
pub const OVERALL_LEVEL: &str = "overall";

impl EstimateTable {
    /// Builds the table from per-stratum treated means, control means and
    /// standard errors, and fills in the overall aggregate.
    pub fn new(sample: &AnalysisSample, mu1: &[f64], mu0: &[f64], se: &[f64]) -> Result<Self> {
        let k = sample.k();
        if mu1.len() != k || mu0.len() != k || se.len() != k {
            return Err(Error::Dimension(format!(
                "estimates have lengths {}, {}, {} for {k} strata",
                mu1.len(),
                mu0.len(),
                se.len()
            )));
        }
        if let Some(g) = (0..k).find(|&g| !(se[g] >= 0.0)) {
            return Err(Error::Numeric(format!("standard error for `{}` is {}", sample.labels()[g], se[g])));
        }
        let subgroups = (0..k)
            .map(|g| SubgroupEstimate {
                group: sample.labels()[g].clone(),
                n_treated: sample.counts()[g].treated,
                mu1: mu1[g],
                mu0: mu0[g],
                tau: mu1[g] - mu0[g],
                se: se[g],
                bias_correction: None,
            })
            .collect();
        let mut table = Self {
            subgroups,
            aggregates: Vec::new(),
            overall: AggregateEstimate {
                level: OVERALL_LEVEL.into(),
                group: OVERALL_LEVEL.into(),
                n_treated: 0,
                mu1: 0.0,
                mu0: 0.0,
                tau: 0.0,
                se: 0.0,
            },
            tau_covariance: None,
        };
        table.refresh_overall();
        Ok(table)
    }

    /// Replaces the subgroup variances with a full covariance matrix and
    /// recomputes every aggregate.
    pub fn set_covariance(&mut self, covariance: Vec<Vec<f64>>) -> Result<()> {
        let k = self.subgroups.len();
        if covariance.len() != k || covariance.iter().any(|r| r.len() != k) {
            return Err(Error::Dimension(format!("covariance must be {k} x {k}")));
        }
        for (g, s) in self.subgroups.iter_mut().enumerate() {
            s.se = covariance[g][g].max(0.0).sqrt();
        }
        self.tau_covariance = Some(covariance);
        self.refresh_overall();
        Ok(())
    }

    fn refresh_overall(&mut self) {
        let all: Vec<usize> = (0..self.subgroups.len()).collect();
        self.overall = self.combine(OVERALL_LEVEL, OVERALL_LEVEL, &all);
    }

    /// `n_1g`-weighted combination of the subgroups in `members`.
    fn combine(&self, level: &str, group: &str, members: &[usize]) -> AggregateEstimate {
        let n1: usize = members.iter().map(|&g| self.subgroups[g].n_treated).sum();
        let w: Vec<f64> = members.iter().map(|&g| self.subgroups[g].n_treated as f64 / n1 as f64).collect();
        let mut mu1 = 0.0;
        let mut mu0 = 0.0;
        let mut tau = 0.0;
        for (&g, &wg) in members.iter().zip(&w) {
            let s = &self.subgroups[g];
            mu1 += wg * s.mu1;
            mu0 += wg * s.mu0;
            tau += wg * s.tau;
        }
        let var = match &self.tau_covariance {
            Some(cov) => {
                let mut v = 0.0;
                for (a, &g) in members.iter().enumerate() {
                    for (b, &h) in members.iter().enumerate() {
                        v += w[a] * w[b] * cov[g][h];
                    }
                }
                v
            }
            None => members.iter().zip(&w).map(|(&g, wg)| wg * wg * self.subgroups[g].se.powi(2)).sum(),
        };
        AggregateEstimate {
            level: level.into(),
            group: group.into(),
            n_treated: n1,
            mu1,
            mu0,
            tau,
            se: var.max(0.0).sqrt(),
        }
    }

    /// Adds one aggregate row per level of `grouping`.
    pub fn aggregate(&mut self, grouping: &Grouping, sample: &AnalysisSample) -> Result<()> {
        if sample.k() != self.subgroups.len() {
            return Err(Error::Dimension("grouping sample does not match the table".into()));
        }
        let assignment = grouping.resolve(sample)?;
        let names = grouping.level_names();
        for (l, name) in names.iter().enumerate() {
            let members: Vec<usize> = (0..assignment.len()).filter(|&g| assignment[g] == l).collect();
            if members.is_empty() {
                continue;
            }
            let row = self.combine(&grouping.name, name, &members);
            self.aggregates.push(row);
        }
        Ok(())
    }

    /// Stratum rows, then aggregates in insertion order, then the overall row.
    pub fn rows(&self) -> Vec<EstimateRow> {
        let mut out: Vec<EstimateRow> = self
            .subgroups
            .iter()
            .map(|s| EstimateRow {
                level: SUBGROUP_LEVEL.into(),
                group: s.group.clone(),
                mu1: s.mu1,
                mu0: s.mu0,
                tau: s.tau,
                se: s.se,
            })
            .collect();
        for a in self.aggregates.iter().chain(std::iter::once(&self.overall)) {
            out.push(EstimateRow {
                level: a.level.clone(),
                group: a.group.clone(),
                mu1: a.mu1,
                mu0: a.mu0,
                tau: a.tau,
                se: a.se,
            });
        }
        out
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.rows() {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn subgroup(&self, label: &str) -> Option<&SubgroupEstimate> {
        self.subgroups.iter().find(|s| s.group == label)
    }

    pub fn taus(&self) -> Vec<f64> {
        self.subgroups.iter().map(|s| s.tau).collect()
    }
}
