//! Balance and overlap diagnostics for a weighting solution.
//!
//! Imbalance is reported in mean-difference units: local entries are divided
//! by `n_1g` and global entries by `n_1`. Features are standardized, so these
//! are standardized mean differences.

use serde::{Deserialize, Serialize};

use crate::data::{AnalysisSample, FeatureMatrix};
use crate::error::{Error, Result};
use crate::solver::WeightSolution;

pub const HISTOGRAM_BINS: usize = 20;
pub const DEFAULT_WEIGHT_THRESHOLD: f64 = 0.001;

/// Kish effective sample size `(sum w)^2 / sum w^2`.
pub fn kish_ess(weights: &[f64]) -> f64 {
    let sum: f64 = weights.iter().sum();
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    if sq == 0.0 {
        0.0
    } else {
        sum * sum / sq
    }
}

/// One-pass Kish accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KishAccumulator {
    sum: f64,
    sum_sq: f64,
}

impl KishAccumulator {
    pub fn push(&mut self, w: f64) {
        self.sum += w;
        self.sum_sq += w * w;
    }

    pub fn ess(&self) -> f64 {
        if self.sum_sq == 0.0 {
            0.0
        } else {
            self.sum * self.sum / self.sum_sq
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub features: Vec<String>,
    pub strata: Vec<String>,
    /// `|weighted control mean - treated mean|` per stratum and feature.
    pub local: Vec<Vec<f64>>,
    pub global: Vec<f64>,
    pub local_norms: Vec<f64>,
    pub global_norm: f64,
    /// Same quantities with uniform weights `n_1g / n_0g` inside each stratum.
    pub pre_local: Vec<Vec<f64>>,
    pub pre_global: Vec<f64>,
    pub pre_local_norms: Vec<f64>,
    pub pre_global_norm: f64,
    /// Unstratified `|control mean - treated mean|` before weighting.
    pub smd: Vec<f64>,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Absolute local and global imbalance of per-unit weights `gamma`.
pub fn imbalance(gamma: &[f64], features: &FeatureMatrix, sample: &AnalysisSample) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let (n, p) = (features.nrows(), features.ncols());
    if n != sample.len() || gamma.len() != n {
        return Err(Error::Dimension(format!(
            "{} weights, {n} feature rows, {} units",
            gamma.len(),
            sample.len()
        )));
    }
    let k = sample.k();
    let x = features.values();
    let mut local = vec![vec![0.0; p]; k];
    for i in 0..n {
        let g = sample.stratum(i);
        let w = if sample.is_treated(i) { -1.0 } else { gamma[i] };
        for j in 0..p {
            local[g][j] += w * x[(i, j)];
        }
    }
    let mut global = vec![0.0; p];
    for e in &local {
        for (t, v) in global.iter_mut().zip(e) {
            *t += v;
        }
    }
    let n1 = sample.n_treated() as f64;
    let global = global.iter().map(|v| v.abs() / n1).collect();
    let local = local
        .iter()
        .zip(sample.counts())
        .map(|(e, c)| e.iter().map(|v| v.abs() / c.treated as f64).collect())
        .collect();
    Ok((local, global))
}

/// Uniform within-stratum weights `n_1g / n_0g` (treated units get 1).
pub fn uniform_weights(sample: &AnalysisSample) -> Vec<f64> {
    (0..sample.len())
        .map(|i| {
            if sample.is_treated(i) {
                1.0
            } else {
                let c = sample.counts()[sample.stratum(i)];
                c.treated as f64 / c.control as f64
            }
        })
        .collect()
}

pub fn balance_report(gamma: &[f64], features: &FeatureMatrix, sample: &AnalysisSample) -> Result<BalanceReport> {
    let (local, global) = imbalance(gamma, features, sample)?;
    let (pre_local, pre_global) = imbalance(&uniform_weights(sample), features, sample)?;

    let p = features.ncols();
    let x = features.values();
    let (mut mt, mut mc) = (vec![0.0; p], vec![0.0; p]);
    for i in 0..sample.len() {
        let target = if sample.is_treated(i) { &mut mt } else { &mut mc };
        for j in 0..p {
            target[j] += x[(i, j)];
        }
    }
    let (n1, n0) = (sample.n_treated() as f64, sample.n_control() as f64);
    let smd = (0..p).map(|j| (mc[j] / n0 - mt[j] / n1).abs()).collect();

    Ok(BalanceReport {
        features: features.names(),
        strata: sample.labels().to_vec(),
        local_norms: local.iter().map(|e| l2(e)).collect(),
        global_norm: l2(&global),
        pre_local_norms: pre_local.iter().map(|e| l2(e)).collect(),
        pre_global_norm: l2(&pre_global),
        local,
        global,
        pre_local,
        pre_global,
        smd,
    })
}

/// Balance report of a solver output.
pub fn solution_balance(solution: &WeightSolution, features: &FeatureMatrix, sample: &AnalysisSample) -> Result<BalanceReport> {
    balance_report(&solution.gamma, features, sample)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumOverlap {
    pub stratum: String,
    pub n_control: usize,
    pub ess: f64,
    /// Share of controls with `gamma / n_1g` above the threshold.
    pub fraction_above: f64,
    pub max_normalized_weight: f64,
    /// Counts of positive `gamma / n_1g` in equal-width bins over `(0, 1]`;
    /// larger values land in the last bin.
    pub histogram: Vec<usize>,
    pub zero_weights: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub threshold: f64,
    pub strata: Vec<StratumOverlap>,
    pub overall_ess: f64,
    pub overall_fraction_above: f64,
}

/// Effective sample size and weight-distribution summaries per stratum.
pub fn overlap_report(gamma: &[f64], sample: &AnalysisSample, threshold: f64) -> Result<OverlapReport> {
    if gamma.len() != sample.len() {
        return Err(Error::Dimension(format!("{} weights for {} units", gamma.len(), sample.len())));
    }
    let k = sample.k();
    let mut acc = vec![KishAccumulator::default(); k];
    let mut overall = KishAccumulator::default();
    let mut above = vec![0usize; k];
    let mut max_norm = vec![0.0_f64; k];
    let mut hist = vec![vec![0usize; HISTOGRAM_BINS]; k];
    let mut zeros = vec![0usize; k];
    for i in sample.control_indices() {
        let g = sample.stratum(i);
        let w = gamma[i];
        if !(w >= 0.0) || !w.is_finite() {
            return Err(Error::Validation(format!("weight {w} at unit {i} is not a finite nonnegative number")));
        }
        acc[g].push(w);
        overall.push(w);
        let r = w / sample.counts()[g].treated as f64;
        if r > threshold {
            above[g] += 1;
        }
        max_norm[g] = max_norm[g].max(r);
        if w == 0.0 {
            zeros[g] += 1;
        } else {
            let bin = ((r * HISTOGRAM_BINS as f64).ceil() as usize).clamp(1, HISTOGRAM_BINS) - 1;
            hist[g][bin] += 1;
        }
    }
    let mut strata = Vec::with_capacity(k);
    for g in 0..k {
        let n0 = sample.counts()[g].control;
        if zeros[g] == n0 {
            return Err(Error::DegenerateStratum(format!(
                "stratum `{}` has all control weights equal to zero",
                sample.labels()[g]
            )));
        }
        strata.push(StratumOverlap {
            stratum: sample.labels()[g].clone(),
            n_control: n0,
            ess: acc[g].ess(),
            fraction_above: above[g] as f64 / n0 as f64,
            max_normalized_weight: max_norm[g],
            histogram: hist[g].clone(),
            zero_weights: zeros[g],
        });
    }
    Ok(OverlapReport {
        threshold,
        strata,
        overall_ess: overall.ess(),
        overall_fraction_above: above.iter().sum::<usize>() as f64 / sample.n_control() as f64,
    })
}

/// [`overlap_report`] at the default threshold.
pub fn ess(solution: &WeightSolution, sample: &AnalysisSample) -> Result<OverlapReport> {
    overlap_report(&solution.gamma, sample, DEFAULT_WEIGHT_THRESHOLD)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UnitRecord;
    use nalgebra::DMatrix;

    fn toy() -> (AnalysisSample, FeatureMatrix) {
        let units = vec![
            UnitRecord { row: 0, outcome: None, treated: false, subgroup: "a".into(), covariates: vec![0.0] },
            UnitRecord { row: 1, outcome: None, treated: false, subgroup: "a".into(), covariates: vec![2.0] },
            UnitRecord { row: 2, outcome: None, treated: true, subgroup: "a".into(), covariates: vec![1.0] },
        ];
        let s = AnalysisSample::from_units(units, vec!["x".into()]).unwrap();
        let f = FeatureMatrix::from_values(DMatrix::from_column_slice(3, 1, &[0.0, 2.0, 1.0]), vec!["x".into()]).unwrap();
        (s, f)
    }

    #[test]
    fn hand_fixture_local_imbalance() {
        let (s, f) = toy();
        let r = balance_report(&[0.5, 0.5, 1.0], &f, &s).unwrap();
        assert_eq!(r.local[0][0], 0.0);
        let r = balance_report(&[1.0, 0.0, 1.0], &f, &s).unwrap();
        assert_eq!(r.local[0][0], 1.0);
        assert_eq!(r.global[0], 1.0);
    }

    #[test]
    fn kish_examples() {
        assert_eq!(kish_ess(&[0.5; 4]), 4.0);
        assert_eq!(kish_ess(&[2.0, 0.0, 0.0]), 1.0);
        let mut a = KishAccumulator::default();
        [0.3, 1.2, 0.0, 4.4].iter().for_each(|&w| a.push(w));
        assert!((a.ess() - kish_ess(&[0.3, 1.2, 0.0, 4.4])).abs() < 1e-10);
    }

    #[test]
    fn overlap_histogram_and_zeros() {
        let (s, _) = toy();
        let r = overlap_report(&[1.0, 0.0, 1.0], &s, DEFAULT_WEIGHT_THRESHOLD).unwrap();
        let st = &r.strata[0];
        assert_eq!(st.zero_weights, 1);
        assert_eq!(st.histogram.iter().sum::<usize>(), 1);
        assert_eq!(st.histogram[HISTOGRAM_BINS - 1], 1);
        assert_eq!(st.fraction_above, 0.5);
        assert_eq!(st.ess, 1.0);
        assert_eq!(st.max_normalized_weight, 1.0);
    }

    #[test]
    fn all_zero_stratum_is_degenerate() {
        let (s, _) = toy();
        assert!(matches!(
            overlap_report(&[0.0, 0.0, 1.0], &s, DEFAULT_WEIGHT_THRESHOLD),
            Err(Error::DegenerateStratum(_))
        ));
    }

    #[test]
    fn ess_scale_invariant() {
        let w = [0.2, 0.9, 1.7, 0.05];
        let scaled: Vec<f64> = w.iter().map(|v| v * 13.0).collect();
        assert!((kish_ess(&w) - kish_ess(&scaled)).abs() < 1e-12);
    }
}
