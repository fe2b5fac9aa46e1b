use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::data::{AnalysisSample, FeatureMatrix, Grouping, UnitRecord};

fn unit(row: usize, g: &str, treated: bool, y: f64, x: Vec<f64>) -> UnitRecord {
    UnitRecord { row, outcome: Some(y), treated, subgroup: g.into(), covariates: x }
}

fn toy() -> (AnalysisSample, Vec<f64>, Vec<f64>) {
    let units = vec![unit(0, "a", true, 1.0, vec![0.0]), unit(1, "a", false, 0.0, vec![0.0]), unit(2, "a", false, 4.0, vec![0.0])];
    let sample = AnalysisSample::from_units(units, vec!["x".into()]).unwrap();
    (sample, vec![1.0, 0.5, 0.5], vec![1.0, 0.0, 4.0])
}

fn features_of(sample: &AnalysisSample) -> FeatureMatrix {
    let x = sample.covariate_matrix();
    let names = sample.covariate_names().to_vec();
    FeatureMatrix::from_values(x, names).unwrap()
}

struct Constant(f64);
impl OutcomeModel for Constant {
    fn predict(&self, _: &[f64], _: usize) -> f64 {
        self.0
    }
}

struct Linear(Vec<f64>, f64);
impl OutcomeModel for Linear {
    fn predict(&self, row: &[f64], _: usize) -> f64 {
        self.1 + row.iter().zip(&self.0).map(|(a, b)| a * b).sum::<f64>()
    }
}

#[test]
fn weighted_mean_toy() {
    let (sample, gamma, y) = toy();
    let t = weighted_means(&gamma, &sample, &y).unwrap();
    assert_eq!(t.subgroups[0].mu0, 2.0);
    assert_eq!(t.subgroups[0].mu1, 1.0);
    assert_eq!(t.subgroups[0].tau, -1.0);
}

#[test]
fn sandwich_toy_is_sqrt_two() {
    let (sample, gamma, y) = toy();
    let se = sandwich_se(&gamma, &sample, &y, ResidualSource::GroupMean).unwrap();
    assert!((se[0] - 2f64.sqrt()).abs() < 1e-12);
}

#[test]
fn constant_outcomes_have_zero_se_and_equal_means() {
    let (sample, gamma, _) = toy();
    let y = vec![3.0; 3];
    let t = weighted_means(&gamma, &sample, &y).unwrap();
    assert_eq!(t.subgroups[0].mu0, 3.0);
    assert_eq!(t.subgroups[0].se, 0.0);
}

#[test]
fn interpolating_model_removes_control_term() {
    let (sample, gamma, y) = toy();
    // a single treated unit, so only the control term could contribute
    let preds = [0.0, 0.0, 4.0];
    struct Lookup([f64; 3]);
    impl OutcomeModel for Lookup {
        fn predict(&self, row: &[f64], _: usize) -> f64 {
            self.0[row[0] as usize]
        }
    }
    let f = FeatureMatrix::from_values(DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]), vec!["id".into()]).unwrap();
    let model = Lookup(preds);
    let se = sandwich_se(&gamma, &sample, &y, ResidualSource::OutcomeModel(&model, &f)).unwrap();
    assert_eq!(se[0], 0.0);
}

#[test]
fn constant_model_has_zero_bias() {
    let (sample, gamma, y) = toy();
    let f = features_of(&sample);
    let plain = weighted_means(&gamma, &sample, &y).unwrap();
    let aug = augment(&gamma, &Constant(7.5), &f, &sample, &y).unwrap();
    assert!(aug.subgroups[0].bias_correction.unwrap().abs() < 1e-12);
    assert!((aug.subgroups[0].tau - plain.subgroups[0].tau).abs() < 1e-12);
}

#[test]
fn linear_model_on_balanced_features_is_noop() {
    // controls at x = 0 and 2 with weight 1/2 each balance a treated unit at 1
    let units = vec![
        unit(0, "a", true, 5.0, vec![1.0]),
        unit(1, "a", false, 1.0, vec![0.0]),
        unit(2, "a", false, 2.0, vec![2.0]),
    ];
    let sample = AnalysisSample::from_units(units, vec!["x".into()]).unwrap();
    let gamma = vec![1.0, 0.5, 0.5];
    let y = sample.outcomes().unwrap();
    let f = features_of(&sample);
    let aug = augment(&gamma, &Linear(vec![3.0], -2.0), &f, &sample, &y).unwrap();
    assert!(aug.subgroups[0].bias_correction.unwrap().abs() < 1e-12);
}

#[test]
fn table_identities() {
    let units = vec![
        unit(0, "a", true, 1.0, vec![0.0]),
        unit(1, "a", true, 2.0, vec![0.0]),
        unit(2, "a", false, 0.5, vec![0.0]),
        unit(3, "b", true, 3.0, vec![0.0]),
        unit(4, "b", false, 1.0, vec![0.0]),
        unit(5, "b", false, 2.0, vec![0.0]),
    ];
    let sample = AnalysisSample::from_units(units, vec!["x".into()]).unwrap();
    let gamma = vec![1.0, 1.0, 2.0, 1.0, 0.25, 0.75];
    let y = sample.outcomes().unwrap();
    let mut t = weighted_means(&gamma, &sample, &y).unwrap();
    for s in &t.subgroups {
        assert_eq!(s.tau, s.mu1 - s.mu0);
    }
    let expect = (2.0 * t.subgroups[0].tau + t.subgroups[1].tau) / 3.0;
    assert!((t.overall.tau - expect).abs() < 1e-15);
    t.aggregate(&Grouping::all_in_one(&sample), &sample).unwrap();
    assert_eq!(t.aggregates[0].tau, t.overall.tau);
    let csv = t.to_csv_string().unwrap();
    assert!(csv.starts_with("level,group,mu1,mu0,tau,se\n"));
    assert_eq!(csv.lines().count(), 1 + 2 + 1 + 1);
}

#[test]
fn odds_weights() {
    assert_eq!(odds_weight(0.5).unwrap(), 1.0);
    assert!((odds_weight(2.0 / 3.0).unwrap() - 2.0).abs() < 1e-12);
    assert!(matches!(odds_weight(1.0), Err(crate::Error::Overlap(_))));
}

fn logistic_sample(n: usize, p: usize, k: usize, seed: u64, truth: &[f64], intercept: f64) -> AnalysisSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = ["a", "b", "c", "d"];
    let units = (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            let eta = intercept + x.iter().zip(truth).map(|(a, b)| a * b).sum::<f64>();
            let treated = rng.random_bool(sigmoid(eta));
            unit(i, labels[i % k], treated, 0.0, x)
        })
        .collect();
    AnalysisSample::from_units(units, (0..p).map(|j| format!("x{j}")).collect()).unwrap()
}

#[test]
fn intercept_only_logistic() {
    let units: Vec<UnitRecord> = (0..40).map(|i| unit(i, "a", i % 4 == 0, 0.0, vec![0.0])).collect();
    let sample = AnalysisSample::from_units(units, vec!["x".into()]).unwrap();
    let f = features_of(&sample);
    let cfg = PropensityConfig::default();
    let model = fit_propensity_at(&f, &sample, 1e-10, &cfg).unwrap();
    assert!((model.coefficients.intercepts[0] - (0.25f64 / 0.75).ln()).abs() < 1e-4);
}

#[test]
fn separable_data_stays_finite() {
    let units: Vec<UnitRecord> = (0..20).map(|i| unit(i, "a", i >= 10, 0.0, vec![i as f64 - 9.5])).collect();
    let sample = AnalysisSample::from_units(units, vec!["x".into()]).unwrap();
    let f = features_of(&sample);
    for mode in [PropensityMode::FullInteraction, PropensityMode::FixedEffects] {
        let model = fit_propensity_at(&f, &sample, 1.0, &PropensityConfig::default().with_mode(mode)).unwrap();
        for i in 0..sample.len() {
            let e = model.probability(&f.row(i), 0);
            assert!(e > 0.0 && e < 1.0);
        }
    }
}

#[test]
fn logistic_recovers_truth() {
    let truth = [1.0, -0.5, 0.25];
    let sample = logistic_sample(5000, 3, 1, 11, &truth, -0.3);
    let f = features_of(&sample);
    for mode in [PropensityMode::FullInteraction, PropensityMode::FixedEffects] {
        let model = fit_propensity_at(&f, &sample, 1e-6, &PropensityConfig::default().with_mode(mode)).unwrap();
        let slope = model.coefficients.slope(0);
        for (b, t) in slope.iter().zip(&truth) {
            assert!((b - t).abs() < 0.1, "{slope:?}");
        }
        assert!((model.coefficients.intercepts[0] + 0.3).abs() < 0.1);
        assert!(model.gradient_norm <= 1e-8);
    }
}

#[test]
fn hajek_weights_sum_to_treated_counts() {
    let sample = logistic_sample(300, 2, 3, 5, &[0.5, -0.5], -0.5);
    let f = features_of(&sample);
    let model = fit_propensity(&f, &sample, &PropensityConfig::default()).unwrap();
    assert_eq!(model.cv.len(), DEFAULT_PENALTY_GRID.len());
    let w = ipw_weights(&model, &f, &sample, IpwNormalization::Hajek).unwrap();
    let mut sums = vec![0.0; sample.k()];
    for i in sample.control_indices() {
        sums[sample.stratum(i)] += w.gamma[i];
    }
    for (s, c) in sums.iter().zip(sample.counts()) {
        assert!((s - c.treated as f64).abs() < 1e-10);
    }
}

#[test]
fn ridge_interpolates_noiseless_linear_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let units: Vec<UnitRecord> = (0..120)
        .map(|i| {
            let x: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let g = if i % 2 == 0 { "a" } else { "b" };
            let y = if g == "a" { 1.0 + 2.0 * x[0] - x[1] } else { -1.0 + 0.5 * x[0] + 3.0 * x[1] };
            unit(i, g, i % 5 == 0, y, x)
        })
        .collect();
    let sample = AnalysisSample::from_units(units, vec!["x0".into(), "x1".into()]).unwrap();
    let y = sample.outcomes().unwrap();
    let f = features_of(&sample);
    let model = fit_outcome_ridge_at(&f, &sample, &y, 1e-8).unwrap();
    for i in 0..sample.len() {
        assert!((model.predict(&f.row(i), sample.stratum(i)) - y[i]).abs() < 1e-6);
    }
    let flat = fit_outcome_ridge_at(&f, &sample, &y, 1e12).unwrap();
    for g in 0..sample.k() {
        let controls: Vec<f64> =
            sample.control_indices().into_iter().filter(|&i| sample.stratum(i) == g).map(|i| y[i]).collect();
        let mean = controls.iter().sum::<f64>() / controls.len() as f64;
        // predictions collapse to the stratum control mean
        assert!(flat.coefficients.slope(g).iter().all(|b| b.abs() < 1e-6));
        let xbar: Vec<f64> = (0..2)
            .map(|j| {
                let idx: Vec<usize> =
                    sample.control_indices().into_iter().filter(|&i| sample.stratum(i) == g).collect();
                idx.iter().map(|&i| f.values()[(i, j)]).sum::<f64>() / idx.len() as f64
            })
            .collect();
        assert!((flat.predict(&xbar, g) - mean).abs() < 1e-6);
    }
    assert!(matches!(fit_outcome_ridge_at(&f, &sample, &y, 0.0), Err(crate::Error::Singular(_))));
}

#[test]
fn regression_recovers_constant_effect() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let units: Vec<UnitRecord> = (0..4000)
        .map(|i| {
            let x: f64 = rng.sample(StandardNormal);
            let treated = rng.random_bool(0.5);
            let e: f64 = rng.sample(StandardNormal);
            let y = 1.0 + 2.0 * x + if treated { 0.7 } else { 0.0 } + e;
            unit(i, if i % 3 == 0 { "a" } else { "b" }, treated, y, vec![x])
        })
        .collect();
    let sample = AnalysisSample::from_units(units, vec!["x".into()]).unwrap();
    let y = sample.outcomes().unwrap();
    let f = features_of(&sample);
    let t = linear_regression_baseline(&f, &sample, &y, RegressionInteraction::None).unwrap();
    assert!((t.overall.tau - 0.7).abs() < 4.0 * t.overall.se);
    let by = linear_regression_baseline(&f, &sample, &y, RegressionInteraction::ByGrouping(&Grouping::identity(&sample))).unwrap();
    for s in &by.subgroups {
        assert!((s.tau - 0.7).abs() < 4.0 * s.se);
    }
}

#[test]
fn regression_rejects_level_without_treatment_variation() {
    let names = vec!["one".to_string(), "two".to_string()];
    assert!(super::regression::check_variation(&[4, 3], &[2, 1], &names).is_ok());
    assert!(matches!(
        super::regression::check_variation(&[4, 3], &[2, 3], &names),
        Err(crate::Error::Singular(_))
    ));
    assert!(super::regression::check_variation(&[4, 0], &[2, 0], &names).is_ok());
}
