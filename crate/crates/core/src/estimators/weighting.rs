//! Weighted control means, sandwich standard errors, and augmentation.

use super::outcome::{predict_all, OutcomeModel};
use super::table::EstimateTable;
use crate::data::{AnalysisSample, FeatureMatrix};
use crate::error::{Error, Result};

/// Reference value subtracted from control outcomes in the variance.
#[derive(Clone, Copy)]
pub enum ResidualSource<'a> {
    /// The weighted control mean of the stratum.
    GroupMean,
    /// Outcome-model predictions.
    OutcomeModel(&'a dyn OutcomeModel, &'a FeatureMatrix),
}

fn check_lengths(gamma: &[f64], sample: &AnalysisSample, outcomes: &[f64]) -> Result<()> {
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

/// Treated means `(1/n_1g) sum_t Y` and weighted control means
/// `(1/n_1g) sum_c gamma Y` per stratum.
pub fn stratum_means(gamma: &[f64], sample: &AnalysisSample, outcomes: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lengths(gamma, sample, outcomes)?;
    let k = sample.k();
    let mut mu1 = vec![0.0; k];
    let mut mu0 = vec![0.0; k];
    for i in 0..sample.len() {
        let g = sample.stratum(i);
        if sample.is_treated(i) {
            mu1[g] += outcomes[i];
        } else {
            mu0[g] += gamma[i] * outcomes[i];
        }
    }
    for (g, c) in sample.counts().iter().enumerate() {
        let n1 = c.treated as f64;
        mu1[g] /= n1;
        mu0[g] /= n1;
    }
    Ok((mu1, mu0))
}

/// Sandwich standard error of each stratum effect:
/// `(1/n_1g^2) [sum_t (Y - mu_1g)^2 + sum_c gamma^2 (Y - r)^2]`.
pub fn sandwich_se(
    gamma: &[f64],
    sample: &AnalysisSample,
    outcomes: &[f64],
    source: ResidualSource,
) -> Result<Vec<f64>> {
    let (mu1, mu0) = stratum_means(gamma, sample, outcomes)?;
    let reference: Vec<f64> = match source {
        ResidualSource::GroupMean => (0..sample.len()).map(|i| mu0[sample.stratum(i)]).collect(),
        ResidualSource::OutcomeModel(model, features) => {
            if features.nrows() != sample.len() {
                return Err(Error::Dimension(format!("{} feature rows for {} units", features.nrows(), sample.len())));
            }
            predict_all(model, features, sample)
        }
    };
    let mut var = vec![0.0; sample.k()];
    for i in 0..sample.len() {
        let g = sample.stratum(i);
        var[g] += if sample.is_treated(i) {
            (outcomes[i] - mu1[g]).powi(2)
        } else {
            (gamma[i] * (outcomes[i] - reference[i])).powi(2)
        };
    }
    Ok(var
        .iter()
        .zip(sample.counts())
        .map(|(v, c)| {
            let n1 = c.treated as f64;
            (v / (n1 * n1)).sqrt()
        })
        .collect())
}

/// Effect table for per-unit weights `gamma` (treated entries ignored), with
/// group-mean sandwich standard errors.
pub fn weighted_means(gamma: &[f64], sample: &AnalysisSample, outcomes: &[f64]) -> Result<EstimateTable> {
    let (mu1, mu0) = stratum_means(gamma, sample, outcomes)?;
    let se = sandwich_se(gamma, sample, outcomes, ResidualSource::GroupMean)?;
    EstimateTable::new(sample, &mu1, &mu0, &se)
}

/// Per-stratum bias estimate
/// `(1/n_1g) sum_t m_0(X) - (1/n_1g) sum_c gamma m_0(X)`.
pub fn bias_terms(
    gamma: &[f64],
    model: &dyn OutcomeModel,
    features: &FeatureMatrix,
    sample: &AnalysisSample,
) -> Result<Vec<f64>> {
    if gamma.len() != sample.len() || features.nrows() != sample.len() {
        return Err(Error::Dimension("weights, features and sample differ in length".into()));
    }
    let preds = predict_all(model, features, sample);
    if let Some(i) = preds.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("outcome model prediction for row {}", sample.units()[i].row)));
    }
    let mut bias = vec![0.0; sample.k()];
    for i in 0..sample.len() {
        let g = sample.stratum(i);
        bias[g] += if sample.is_treated(i) { preds[i] } else { -gamma[i] * preds[i] };
    }
    for (b, c) in bias.iter_mut().zip(sample.counts()) {
        *b /= c.treated as f64;
    }
    Ok(bias)
}

/// Bias-corrected estimates: each `mu_0g` gains the model's estimate of the
/// remaining imbalance, and standard errors use model residuals.
pub fn augment(
    gamma: &[f64],
    model: &dyn OutcomeModel,
    features: &FeatureMatrix,
    sample: &AnalysisSample,
    outcomes: &[f64],
) -> Result<EstimateTable> {
    let (mu1, mu0) = stratum_means(gamma, sample, outcomes)?;
    let bias = bias_terms(gamma, model, features, sample)?;
    let mu0_aug: Vec<f64> = mu0.iter().zip(&bias).map(|(m, b)| m + b).collect();
    let se = sandwich_se(gamma, sample, outcomes, ResidualSource::OutcomeModel(model, features))?;
    let mut table = EstimateTable::new(sample, &mu1, &mu0_aug, &se)?;
    for (s, b) in table.subgroups.iter_mut().zip(bias) {
        s.bias_correction = Some(b);
    }
    Ok(table)
}
