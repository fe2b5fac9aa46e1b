//! Linear regression baseline with heteroskedasticity-robust errors.

use nalgebra::{DMatrix, DVector};

use super::table::EstimateTable;
use crate::data::{AnalysisSample, FeatureMatrix, Grouping};
use crate::error::{Error, Result};
use crate::linalg::spd_cholesky;

#[derive(Debug, Clone, Copy)]
pub enum RegressionInteraction<'a> {
    /// A single treatment coefficient.
    None,
    /// One treatment coefficient and one main effect per grouping level.
    ByGrouping(&'a Grouping),
}

/// OLS of the outcome on treatment and the features, with HC1 standard
/// errors. Every stratum inherits the treatment effect of its level.
pub fn linear_regression_baseline(
    features: &FeatureMatrix,
    sample: &AnalysisSample,
    outcomes: &[f64],
    interaction: RegressionInteraction,
) -> Result<EstimateTable> {
    let n = sample.len();
    if features.nrows() != n || outcomes.len() != n {
        return Err(Error::Dimension("features, outcomes and sample differ in length".into()));
    }
    let (level_of, names) = match interaction {
        RegressionInteraction::None => (vec![0; sample.k()], vec!["all".to_string()]),
        RegressionInteraction::ByGrouping(grouping) => (grouping.resolve(sample)?, grouping.level_names()),
    };
    let levels = names.len();
    let mut treated = vec![0usize; levels];
    let mut units = vec![0usize; levels];
    for i in 0..n {
        let l = level_of[sample.stratum(i)];
        units[l] += 1;
        treated[l] += usize::from(sample.is_treated(i));
    }
    check_variation(&units, &treated, &names)?;
    let present: Vec<usize> = (0..levels).filter(|&l| units[l] > 0).collect();
    let column_of: Vec<Option<usize>> = {
        let mut map = vec![None; levels];
        for (c, &l) in present.iter().enumerate() {
            map[l] = Some(c);
        }
        map
    };
    // intercept, level main effects (first present level as baseline),
    // one treatment column per level, features
    let m = present.len();
    let p = features.ncols();
    let cols = 1 + (m - 1) + m + p;
    let x = DMatrix::from_fn(n, cols, |i, c| {
        let l = level_of[sample.stratum(i)];
        let lc = column_of[l].expect("level present");
        if c == 0 {
            1.0
        } else if c < m {
            f64::from(lc == c)
        } else if c < 2 * m {
            f64::from(lc == c - m && sample.is_treated(i))
        } else {
            features.values()[(i, c - 2 * m)]
        }
    });
    let y = DVector::from_column_slice(outcomes);
    let xtx = x.transpose() * &x;
    let chol = spd_cholesky(xtx, "regression design").map_err(|e| match e {
        Error::Singular(msg) => Error::Singular(format!("{msg}; the regression design is rank deficient")),
        other => other,
    })?;
    let beta = chol.solve(&(x.transpose() * &y));
    let resid = &y - &x * &beta;
    if n <= cols {
        return Err(Error::Singular(format!("{n} observations for {cols} regression coefficients")));
    }
    let mut meat = DMatrix::zeros(cols, cols);
    for i in 0..n {
        let xi = x.row(i);
        meat += (xi.transpose() * xi) * resid[i].powi(2);
    }
    let bread = chol.inverse();
    let cov = (&bread * meat * &bread) * (n as f64 / (n - cols) as f64);

    let k = sample.k();
    let tau_col: Vec<usize> = (0..k).map(|g| m + column_of[level_of[g]].expect("level present")).collect();
    let mut mu1 = vec![0.0; k];
    for i in sample.treated_indices() {
        mu1[sample.stratum(i)] += outcomes[i];
    }
    for (g, c) in sample.counts().iter().enumerate() {
        mu1[g] /= c.treated as f64;
    }
    let mu0: Vec<f64> = (0..k).map(|g| mu1[g] - beta[tau_col[g]]).collect();
    let se: Vec<f64> = (0..k).map(|g| cov[(tau_col[g], tau_col[g])].max(0.0).sqrt()).collect();
    let mut table = EstimateTable::new(sample, &mu1, &mu0, &se)?;
    let covariance = (0..k).map(|g| (0..k).map(|h| cov[(tau_col[g], tau_col[h])]).collect()).collect();
    table.set_covariance(covariance)?;
    Ok(table)
}

pub(super) fn check_variation(units: &[usize], treated: &[usize], names: &[String]) -> Result<()> {
    for l in 0..units.len() {
        if units[l] > 0 && (treated[l] == 0 || treated[l] == units[l]) {
            return Err(Error::Singular(format!(
                "level `{}` has no treatment variation; its interaction coefficient is undefined",
                names[l]
            )));
        }
    }
    Ok(())
}
