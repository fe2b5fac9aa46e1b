//! Shared fixtures and independent oracles for integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use subgroup_balance::data::{build_features, AnalysisSample, FeatureMatrix, FeatureSpec, UnitRecord};
use subgroup_balance::solver::Pooling;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random sample with `k` strata; treated units are shifted by `shift`
/// so the design is confounded but overlapping. Every stratum gets at least
/// one treated unit and `p + 1` controls.
pub fn random_sample(rng: &mut ChaCha8Rng, n: usize, p: usize, k: usize, shift: f64) -> AnalysisSample {
    let labels = ["s0", "s1", "s2", "s3", "s4", "s5", "s6", "s7"];
    let min_per = p + 2;
    assert!(n >= k * min_per, "n too small");
    let mut units = Vec::with_capacity(n);
    for i in 0..n {
        let g = if i < k * min_per { i / min_per } else { rng.random_range(0..k) };
        let forced_treated = i < k * min_per && i % min_per == 0;
        let forced_control = i < k * min_per && i % min_per != 0;
        let treated = forced_treated || (!forced_control && rng.random_bool(0.35));
        let offset = g as f64 * 0.3;
        let covariates: Vec<f64> = (0..p)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z + offset + if treated { shift } else { 0.0 }
            })
            .collect();
        let outcome = covariates.iter().sum::<f64>() + rng.sample::<f64, _>(StandardNormal);
        units.push(UnitRecord { row: i, outcome: Some(outcome), treated, subgroup: labels[g].to_string(), covariates });
    }
    let names = (0..p).map(|j| format!("x{j}")).collect();
    AnalysisSample::from_units(units, names).unwrap()
}

pub fn standardized(sample: &AnalysisSample) -> FeatureMatrix {
    build_features(sample, &FeatureSpec::default()).unwrap()
}

/// Equality-constrained, nonnegative quadratic program
/// `min 1/2 x'Qx + c'x  s.t.  Ax = b, x >= 0`.
pub struct Qp {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

fn largest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut est = 0.0;
    for _ in 0..500 {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        est = norm;
        v = w / norm;
    }
    est * 1.01
}

impl Qp {
    /// Augmented Lagrangian outer loop with accelerated projected gradient
    /// inner solves, followed by an exact re-solve on the detected support.
    pub fn solve(&self) -> DVector<f64> {
        let n = self.q.nrows();
        let rho = 10.0;
        let ata = self.a.transpose() * &self.a;
        let lip = largest_eigenvalue(&self.q) + rho * largest_eigenvalue(&ata);
        let step = 1.0 / lip;
        let mut x = DVector::zeros(n);
        let mut y = DVector::zeros(self.a.nrows());
        for _outer in 0..400 {
            let mut z = x.clone();
            let mut t = 1.0_f64;
            let mut prev = x.clone();
            for _inner in 0..3000 {
                let r = &self.a * &z - &self.b;
                let grad = &self.q * &z + &self.c + self.a.transpose() * (&y + rho * &r);
                let next = (&z - step * grad).map(|v| v.max(0.0));
                let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
                let moved = (&next - &prev).norm();
                z = &next + ((t - 1.0) / t_next) * (&next - &prev);
                z = z.map(|v| v.max(0.0));
                prev = next;
                t = t_next;
                if moved < 1e-13 {
                    break;
                }
            }
            x = prev;
            let r = &self.a * &x - &self.b;
            y += rho * &r;
            if r.norm() < 1e-11 {
                break;
            }
        }
        self.polish(&x).unwrap_or(x)
    }

    fn polish(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let support: Vec<usize> = (0..x.len()).filter(|&i| x[i] > 1e-8).collect();
        let s = support.len();
        let m = self.a.nrows();
        let mut kkt = DMatrix::zeros(s + m, s + m);
        let mut rhs = DVector::zeros(s + m);
        for (a, &i) in support.iter().enumerate() {
            for (b, &j) in support.iter().enumerate() {
                kkt[(a, b)] = self.q[(i, j)];
            }
            for r in 0..m {
                kkt[(a, s + r)] = self.a[(r, i)];
                kkt[(s + r, a)] = self.a[(r, i)];
            }
            rhs[a] = -self.c[i];
        }
        for r in 0..m {
            rhs[s + r] = self.b[r];
        }
        let sol = kkt.svd(true, true).solve(&rhs, 1e-12).ok()?;
        let mut out = DVector::zeros(x.len());
        for (a, &i) in support.iter().enumerate() {
            if sol[a] < -1e-12 {
                return None;
            }
            out[i] = sol[a].max(0.0);
        }
        if (&out - x).amax() > 1e-4 {
            return None;
        }
        Some(out)
    }
}

/// Primal problem over the controls of `sample`, in control order.
///
/// `include_local` adds `1/2 |E_g|^2`; `global` adds exact global balance.
pub fn balancing_qp(
    features: &FeatureMatrix,
    sample: &AnalysisSample,
    lambda_g: &[f64],
    include_local: bool,
    global: bool,
) -> (Qp, Vec<usize>) {
    let controls = sample.control_indices();
    let n0 = controls.len();
    let p = features.ncols();
    let k = sample.k();
    let x = features.values();
    let mut treated_sum = vec![vec![0.0; p]; k];
    for i in sample.treated_indices() {
        for j in 0..p {
            treated_sum[sample.stratum(i)][j] += x[(i, j)];
        }
    }
    let mut q = DMatrix::zeros(n0, n0);
    let mut c = DVector::zeros(n0);
    for (a, &i) in controls.iter().enumerate() {
        let g = sample.stratum(i);
        q[(a, a)] += lambda_g[g];
        if include_local {
            for (b, &j) in controls.iter().enumerate() {
                if sample.stratum(j) == g {
                    q[(a, b)] += (0..p).map(|f| x[(i, f)] * x[(j, f)]).sum::<f64>();
                }
            }
            c[a] = -(0..p).map(|f| x[(i, f)] * treated_sum[g][f]).sum::<f64>();
        }
    }
    let rows = k + if global { p } else { 0 };
    let mut a = DMatrix::zeros(rows, n0);
    let mut b = DVector::zeros(rows);
    for (col, &i) in controls.iter().enumerate() {
        a[(sample.stratum(i), col)] = 1.0;
        if global {
            for f in 0..p {
                a[(k + f, col)] = x[(i, f)];
            }
        }
    }
    for g in 0..k {
        b[g] = sample.counts()[g].treated as f64;
    }
    if global {
        for f in 0..p {
            b[k + f] = treated_sum.iter().map(|t| t[f]).sum();
        }
    }
    (Qp { q, c, a, b }, controls)
}

/// Independent primal solution for a pooling mode, as per-unit weights.
pub fn primal_oracle(features: &FeatureMatrix, sample: &AnalysisSample, lambda_g: &[f64], pooling: Pooling) -> Vec<f64> {
    let (include_local, global) = match pooling {
        Pooling::Partial => (true, true),
        Pooling::Full => (false, true),
        Pooling::None => (true, false),
    };
    let (qp, controls) = balancing_qp(features, sample, lambda_g, include_local, global);
    let x = qp.solve();
    let mut gamma = vec![1.0; sample.len()];
    for (a, &i) in controls.iter().enumerate() {
        gamma[i] = x[a];
    }
    gamma
}

pub fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
