//! Effect estimates from weights: weighted means, sandwich errors,
//! augmentation, and the IPW, outcome-model and regression baselines.

mod design;
mod outcome;
mod propensity;
mod regression;
mod table;
mod weighting;

pub use design::{CvPoint, LinearCoefficients, SlopeStructure, DEFAULT_FOLDS, DEFAULT_PENALTY_GRID};
pub use outcome::{
    fit_outcome_ridge, fit_outcome_ridge_at, outcome_model_estimates, predict_all, OutcomeModel, RidgeConfig,
    RidgeOutcomeModel,
};
pub use propensity::{
    fit_propensity, fit_propensity_at, ipw_weights, odds_weight, sigmoid, IpwNormalization, IpwWeights,
    PropensityConfig, PropensityMode, PropensityModel,
};
pub use regression::{linear_regression_baseline, RegressionInteraction};
pub use table::{AggregateEstimate, EstimateRow, EstimateTable, SubgroupEstimate, OVERALL_LEVEL, SUBGROUP_LEVEL};
pub use weighting::{augment, bias_terms, sandwich_se, stratum_means, weighted_means, ResidualSource};

#[cfg(test)]
mod tests;
