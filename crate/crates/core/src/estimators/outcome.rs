//! Control outcome models `m_0(x, g)`.

use serde::{Deserialize, Serialize};

use super::design::{
    cross_validate, select_penalty, stratified_folds, validate_grid, CvPoint, Design, LinearCoefficients,
    SlopeStructure, DEFAULT_FOLDS, DEFAULT_PENALTY_GRID,
};
use super::table::EstimateTable;
use crate::data::{AnalysisSample, FeatureMatrix};
use crate::error::{Error, Result};
use crate::rng::{stream, Stage};

/// A fitted predictor of the control outcome.
pub trait OutcomeModel: Send + Sync {
    fn predict(&self, row: &[f64], stratum: usize) -> f64;
}

/// Predictions for every unit of `sample`.
pub fn predict_all(model: &dyn OutcomeModel, features: &FeatureMatrix, sample: &AnalysisSample) -> Vec<f64> {
    (0..sample.len()).map(|i| model.predict(&features.row(i), sample.stratum(i))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeConfig {
    pub penalty_grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        Self { penalty_grid: DEFAULT_PENALTY_GRID.to_vec(), folds: DEFAULT_FOLDS, seed: 0 }
    }
}

/// Ridge regression on the features fully interacted with the strata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeOutcomeModel {
    pub penalty: f64,
    pub coefficients: LinearCoefficients,
    pub cv: Vec<CvPoint>,
}

impl OutcomeModel for RidgeOutcomeModel {
    fn predict(&self, row: &[f64], stratum: usize) -> f64 {
        self.coefficients.predict(row, stratum)
    }
}

fn control_design<'a>(features: &'a FeatureMatrix, sample: &AnalysisSample) -> Design<'a> {
    let rows = sample.control_indices();
    let strata = rows.iter().map(|&i| sample.stratum(i)).collect();
    Design { x: features.values(), rows, strata, k: sample.k(), structure: SlopeStructure::Interacted }
}

fn check_inputs(features: &FeatureMatrix, sample: &AnalysisSample, outcomes: &[f64]) -> Result<()> {
    if features.nrows() != sample.len() || outcomes.len() != sample.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows and {} outcomes for {} units",
            features.nrows(),
            outcomes.len(),
            sample.len()
        )));
    }
    Ok(())
}

fn fit_rows(design: &Design, y: &[f64], positions: &[usize], penalty: f64) -> Result<LinearCoefficients> {
    let sub = Design {
        x: design.x,
        rows: positions.iter().map(|&r| design.rows[r]).collect(),
        strata: positions.iter().map(|&r| design.strata[r]).collect(),
        k: design.k,
        structure: design.structure,
    };
    let w = vec![1.0; positions.len()];
    let v: Vec<f64> = positions.iter().map(|&r| y[r]).collect();
    sub.solve(&w, &v, penalty, None)
}

/// Fits on the controls at a fixed penalty.
pub fn fit_outcome_ridge_at(
    features: &FeatureMatrix,
    sample: &AnalysisSample,
    outcomes: &[f64],
    penalty: f64,
) -> Result<RidgeOutcomeModel> {
    check_inputs(features, sample, outcomes)?;
    if !(penalty >= 0.0 && penalty.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge penalty must be nonnegative, got {penalty}")));
    }
    let design = control_design(features, sample);
    let y: Vec<f64> = design.rows.iter().map(|&i| outcomes[i]).collect();
    let all: Vec<usize> = (0..y.len()).collect();
    let coefficients = fit_rows(&design, &y, &all, penalty)?;
    Ok(RidgeOutcomeModel { penalty, coefficients, cv: Vec::new() })
}

/// Fits on the controls with the penalty chosen by cross-validated squared
/// error.
pub fn fit_outcome_ridge(
    features: &FeatureMatrix,
    sample: &AnalysisSample,
    outcomes: &[f64],
    config: &RidgeConfig,
) -> Result<RidgeOutcomeModel> {
    check_inputs(features, sample, outcomes)?;
    validate_grid(&config.penalty_grid, config.folds)?;
    if config.penalty_grid.len() == 1 {
        return fit_outcome_ridge_at(features, sample, outcomes, config.penalty_grid[0]);
    }
    let design = control_design(features, sample);
    let y: Vec<f64> = design.rows.iter().map(|&i| outcomes[i]).collect();
    let mut rng = stream(config.seed, 0, Stage::CrossValidation);
    let folds = stratified_folds(&design.strata, design.k, config.folds, &mut rng);
    let cv = cross_validate(
        &design.strata,
        design.k,
        &config.penalty_grid,
        &folds,
        config.folds,
        |train, penalty| fit_rows(&design, &y, train, penalty),
        |coefs, r| {
            let e = y[r] - coefs.predict(&design.row(r), design.strata[r]);
            e * e
        },
    )?;
    let penalty = select_penalty(&cv);
    let mut model = fit_outcome_ridge_at(features, sample, outcomes, penalty)?;
    model.cv = cv;
    Ok(model)
}

/// Imputes `mu_0g` as the mean prediction over the treated units of `g`.
///
/// The standard error combines the treated-outcome variance with the spread
/// of the treated predictions, treating the fitted model as fixed.
pub fn outcome_model_estimates(
    model: &dyn OutcomeModel,
    features: &FeatureMatrix,
    sample: &AnalysisSample,
    outcomes: &[f64],
) -> Result<EstimateTable> {
    check_inputs(features, sample, outcomes)?;
    let k = sample.k();
    let mut mu1 = vec![0.0; k];
    let mut mu0 = vec![0.0; k];
    let preds = predict_all(model, features, sample);
    for i in sample.treated_indices() {
        let g = sample.stratum(i);
        mu1[g] += outcomes[i];
        mu0[g] += preds[i];
    }
    let n1: Vec<f64> = sample.counts().iter().map(|c| c.treated as f64).collect();
    for g in 0..k {
        mu1[g] /= n1[g];
        mu0[g] /= n1[g];
    }
    let mut var = vec![0.0; k];
    for i in sample.treated_indices() {
        let g = sample.stratum(i);
        var[g] += (outcomes[i] - mu1[g]).powi(2) + (preds[i] - mu0[g]).powi(2);
    }
    let se: Vec<f64> = (0..k).map(|g| (var[g] / (n1[g] * n1[g])).sqrt()).collect();
    EstimateTable::new(sample, &mu1, &mu0, &se)
}
