mod common;

use rand::Rng;
use rand_distr::StandardNormal;

use common::{random_sample, rng, standardized};
use subgroup_balance::data::{AnalysisSample, UnitRecord};
use subgroup_balance::diagnostics::uniform_weights;
use subgroup_balance::estimators::weighted_means;
use subgroup_balance::sensitivity::{
    bootstrap_ci, breakdown_lambda, point_bounds, ratio_mean_range, BootstrapReplicates, SensitivityConfig,
    SensitivityTarget,
};
use subgroup_balance::solver::{solve, SolverConfig};

/// Extremes of `sum w c y / sum w c` over every corner `c in {1/L, L}^n`.
fn corner_extremes(w: &[f64], y: &[f64], lambda: f64) -> (f64, f64) {
    let n = w.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for mask in 0u32..(1 << n) {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            let c = if mask >> i & 1 == 1 { lambda } else { 1.0 / lambda };
            num += w[i] * c * y[i];
            den += w[i] * c;
        }
        lo = lo.min(num / den);
        hi = hi.max(num / den);
    }
    (lo, hi)
}

#[test]
fn threshold_sort_matches_corner_enumeration() {
    let mut r = rng(31);
    for case in 0..100 {
        let n = r.random_range(1..=12);
        let w: Vec<f64> = (0..n).map(|_| r.random_range(0.01..3.0)).collect();
        // ties exercise the sort
        let y: Vec<f64> = (0..n).map(|_| (r.random_range(-4.0..4.0_f64) * 2.0).round() / 2.0).collect();
        let lambda = r.random_range(1.0..4.0);
        let (lo, hi) = ratio_mean_range(&w, &y, lambda).unwrap();
        let (elo, ehi) = corner_extremes(&w, &y, lambda);
        assert!((lo - elo).abs() <= 1e-10 * (1.0 + elo.abs()), "case {case}: {lo} vs {elo}");
        assert!((hi - ehi).abs() <= 1e-10 * (1.0 + ehi.abs()), "case {case}: {hi} vs {ehi}");
    }
}

#[test]
fn stratum_bounds_match_enumeration() {
    let mut r = rng(32);
    let sample = random_sample(&mut r, 30, 1, 3, 0.3);
    let features = standardized(&sample);
    let y = sample.outcomes().unwrap();
    let gamma = solve(&features, &sample, &SolverConfig::default()).unwrap().gamma;
    for g in 0..sample.k() {
        let label = sample.labels()[g].clone();
        let controls: Vec<usize> = sample.control_indices().into_iter().filter(|&i| sample.stratum(i) == g).collect();
        assert!(controls.len() <= 12);
        let treated: Vec<usize> = sample.treated_indices().into_iter().filter(|&i| sample.stratum(i) == g).collect();
        let mu1 = treated.iter().map(|&i| y[i]).sum::<f64>() / treated.len() as f64;
        let w: Vec<f64> = controls.iter().map(|&i| gamma[i]).collect();
        let yc: Vec<f64> = controls.iter().map(|&i| y[i]).collect();
        let (elo, ehi) = corner_extremes(&w, &yc, 2.0);
        let (tmin, tmax) = point_bounds(&gamma, &sample, &y, &SensitivityTarget::Stratum(label), 2.0).unwrap();
        assert!((tmin - (mu1 - ehi)).abs() <= 1e-10);
        assert!((tmax - (mu1 - elo)).abs() <= 1e-10);
    }
}

#[test]
fn unit_lambda_reproduces_point_estimates() {
    let mut r = rng(33);
    let sample = random_sample(&mut r, 160, 3, 4, 0.4);
    let features = standardized(&sample);
    let y = sample.outcomes().unwrap();
    let gamma = solve(&features, &sample, &SolverConfig::default()).unwrap().gamma;
    let table = weighted_means(&gamma, &sample, &y).unwrap();
    let (lo, hi) = point_bounds(&gamma, &sample, &y, &SensitivityTarget::Overall, 1.0).unwrap();
    assert!((lo - table.overall.tau).abs() <= 1e-10);
    assert!((hi - table.overall.tau).abs() <= 1e-10);
    for s in &table.subgroups {
        let (lo, hi) = point_bounds(&gamma, &sample, &y, &SensitivityTarget::Stratum(s.group.clone()), 1.0).unwrap();
        assert!((lo - s.tau).abs() <= 1e-10 && (hi - s.tau).abs() <= 1e-10);
    }
}

#[test]
fn bounds_widen_with_lambda() {
    let mut r = rng(34);
    let sample = random_sample(&mut r, 120, 2, 3, 0.3);
    let features = standardized(&sample);
    let y = sample.outcomes().unwrap();
    let gamma = solve(&features, &sample, &SolverConfig::default()).unwrap().gamma;
    let mut prev = point_bounds(&gamma, &sample, &y, &SensitivityTarget::Overall, 1.0).unwrap();
    for step in 1..30 {
        let lambda = 1.0 + 0.1 * step as f64;
        let b = point_bounds(&gamma, &sample, &y, &SensitivityTarget::Overall, lambda).unwrap();
        assert!(b.0 <= prev.0 + 1e-12 && b.1 >= prev.1 - 1e-12, "lambda {lambda}");
        prev = b;
    }
}

/// Randomized experiment with a constant effect `tau` and two strata.
fn experiment(r: &mut rand_chacha::ChaCha8Rng, n: usize, tau: f64) -> AnalysisSample {
    let units = (0..n)
        .map(|i| {
            let treated = i % 3 == 0;
            let g = (i / 3) % 2;
            let y = g as f64 + if treated { tau } else { 0.0 } + r.sample::<f64, _>(StandardNormal);
            UnitRecord { row: i, outcome: Some(y), treated, subgroup: format!("s{g}"), covariates: vec![0.0] }
        })
        .collect();
    AnalysisSample::from_units(units, vec!["x".into()]).unwrap()
}

fn uniform(s: &AnalysisSample) -> subgroup_balance::Result<Vec<f64>> {
    Ok(uniform_weights(s))
}

#[test]
fn bootstrap_is_reproducible() {
    let mut r = rng(35);
    let sample = random_sample(&mut r, 90, 2, 2, 0.3);
    let y = sample.outcomes().unwrap();
    let procedure = |s: &AnalysisSample| -> subgroup_balance::Result<Vec<f64>> {
        Ok(solve(&standardized(s), s, &SolverConfig::default())?.gamma)
    };
    let config = SensitivityConfig { lambda_sens: 1.3, bootstrap_reps: 60, confidence: 0.9, seed: 4 };
    let a = bootstrap_ci(&procedure, &sample, &y, &SensitivityTarget::Overall, &config).unwrap();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = one.install(|| bootstrap_ci(&procedure, &sample, &y, &SensitivityTarget::Overall, &config).unwrap());
    assert_eq!(a, b);
    assert!(a.lower.unwrap() <= a.tau_min && a.upper.unwrap() >= a.tau_max);
    let other = bootstrap_ci(&procedure, &sample, &y, &SensitivityTarget::Overall, &SensitivityConfig { seed: 5, ..config })
        .unwrap();
    assert_ne!(a.lower, other.lower);
}

#[test]
fn unit_lambda_interval_covers_the_effect() {
    let mut r = rng(36);
    let trials = 200;
    let mut covered = 0;
    for t in 0..trials {
        let sample = experiment(&mut r, 150, 0.5);
        let y = sample.outcomes().unwrap();
        let config = SensitivityConfig { lambda_sens: 1.0, bootstrap_reps: 200, confidence: 0.95, seed: t };
        let b = bootstrap_ci(&uniform, &sample, &y, &SensitivityTarget::Overall, &config).unwrap();
        if b.lower.unwrap() <= 0.5 && 0.5 <= b.upper.unwrap() {
            covered += 1;
        }
    }
    let rate = covered as f64 / trials as f64;
    assert!((0.88..=0.99).contains(&rate), "coverage {rate}");
}

#[test]
fn breakdown_agrees_with_a_linear_scan() {
    let mut r = rng(37);
    let sample = experiment(&mut r, 300, 1.0);
    let y = sample.outcomes().unwrap();
    let reps = BootstrapReplicates::draw(&uniform, &sample, 200, 9).unwrap();
    let grid: Vec<f64> = (0..40).map(|i| 1.05 + 0.05 * i as f64).collect();
    let target = SensitivityTarget::Overall;
    let b = breakdown_lambda(&reps, &sample, &y, &target, &grid, 0.95).unwrap();
    assert!(b.significant && !b.censored);
    let lower = |l: f64| reps.interval(&sample, &y, &target, l, 0.95).unwrap().0;
    let scan = grid.iter().copied().take_while(|&l| lower(l) > 0.0).last().unwrap_or(1.0);
    assert_eq!(b.lambda, scan);
    assert!(b.evaluated.len() < grid.len());

    // a null effect is not significant at all
    let null = experiment(&mut r, 300, 0.0);
    let y0 = null.outcomes().unwrap();
    let reps0 = BootstrapReplicates::draw(&uniform, &null, 200, 9).unwrap();
    let b0 = breakdown_lambda(&reps0, &null, &y0, &target, &grid, 0.95).unwrap();
    if !b0.significant {
        assert_eq!(b0.lambda, 1.0);
    }
}
