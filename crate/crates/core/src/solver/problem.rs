//! Dual objective, gradient, and generalized Hessian for the balancing
//! weights problem.
//!
//! Primal, per stratum `g` with controls `c` and treated `t`:
//!
//! ```text
//! min  sum_g [ 1/2 |E_g|^2 + lambda_g/2 sum_c gamma_i^2 ]
//! s.t. sum_c gamma_i phi_i = sum_t phi_i          (global balance)
//!      sum_{c in g} gamma_i = n_1g               (per stratum)
//!      gamma >= 0
//! ```
//!
//! with `E_g = sum_{c in g} gamma_i phi_i - sum_{t in g} phi_i`. The dual,
//! minimized over `(alpha, beta, mu)`, is
//!
//! ```text
//! sum_g [ 1/(2 lambda_g) sum_c [alpha_g + beta_g.phi_i]_+^2
//!         - sum_t (alpha_g + beta_g.phi_i) + 1/2 |beta_g - mu|^2 ]
//! ```
//!
//! and `gamma_i = [alpha_g + beta_g.phi_i]_+ / lambda_g`. Full pooling drops
//! the local term, which pins `beta_g = mu`; no pooling drops the global
//! constraint, which pins `mu = 0`.

use nalgebra::{DMatrix, DVector};

use super::{DualParams, LambdaScheme, Pooling, SolverConfig};
use crate::data::{AnalysisSample, FeatureMatrix};
use crate::error::{Error, Result};
use crate::linalg::ArrowSystem;

pub(crate) struct StratumData {
    /// Sample indices of the stratum's controls.
    pub controls: Vec<usize>,
    /// Control features, row-major `controls.len() × p`.
    pub phi: Vec<f64>,
    pub n_treated: f64,
    pub treated_sum: Vec<f64>,
    pub lambda: f64,
}

pub(crate) struct Problem {
    pub p: usize,
    pub pooling: Pooling,
    pub strata: Vec<StratumData>,
    pub n_treated: f64,
}

pub(crate) fn stratum_lambdas(sample: &AnalysisSample, config: &SolverConfig) -> Vec<f64> {
    sample
        .counts()
        .iter()
        .map(|c| match config.lambda_scheme {
            LambdaScheme::StratumSize => config.lambda / c.total() as f64,
            LambdaScheme::TreatedCount => config.lambda / c.treated as f64,
            LambdaScheme::Constant => config.lambda,
        })
        .collect()
}

impl Problem {
    pub fn new(features: &FeatureMatrix, sample: &AnalysisSample, config: &SolverConfig) -> Result<Self> {
        if features.nrows() != sample.len() {
            return Err(Error::Dimension(format!(
                "feature matrix has {} rows, sample has {} units",
                features.nrows(),
                sample.len()
            )));
        }
        config.validate()?;
        let p = features.ncols();
        let k = sample.k();
        let lambdas = stratum_lambdas(sample, config);
        let values = features.values();
        let mut strata: Vec<StratumData> = (0..k)
            .map(|g| StratumData {
                controls: Vec::new(),
                phi: Vec::new(),
                n_treated: sample.counts()[g].treated as f64,
                treated_sum: vec![0.0; p],
                lambda: lambdas[g],
            })
            .collect();
        for i in 0..sample.len() {
            let s = &mut strata[sample.stratum(i)];
            if sample.is_treated(i) {
                for j in 0..p {
                    s.treated_sum[j] += values[(i, j)];
                }
            } else {
                s.controls.push(i);
                s.phi.extend(values.row(i).iter());
            }
        }
        Ok(Self { p, pooling: config.pooling, strata, n_treated: sample.n_treated() as f64 })
    }

    pub fn k(&self) -> usize {
        self.strata.len()
    }

    pub fn check_shape(&self, params: &DualParams) -> Result<()> {
        let k = self.k();
        if params.alpha.len() != k
            || params.beta.len() != k
            || params.beta.iter().any(|b| b.len() != self.p)
            || params.mu.len() != self.p
        {
            return Err(Error::Dimension(format!(
                "dual parameters do not match {k} strata and {} features",
                self.p
            )));
        }
        Ok(())
    }

    /// Slope actually used for stratum `g` under the pooling mode.
    fn slope<'a>(&self, params: &'a DualParams, g: usize) -> &'a [f64] {
        match self.pooling {
            Pooling::Full => &params.mu,
            _ => &params.beta[g],
        }
    }

    /// Linear index `alpha_g + beta_g . phi_i` for the `r`-th control of `g`.
    #[inline]
    fn index(&self, alpha: f64, slope: &[f64], s: &StratumData, r: usize) -> f64 {
        let row = &s.phi[r * self.p..(r + 1) * self.p];
        alpha + row.iter().zip(slope).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn objective(&self, params: &DualParams) -> f64 {
        let mut total = 0.0;
        for (g, s) in self.strata.iter().enumerate() {
            let alpha = params.alpha[g];
            let slope = self.slope(params, g);
            let mut hinge = 0.0;
            for r in 0..s.controls.len() {
                let z = self.index(alpha, slope, s, r);
                if z > 0.0 {
                    hinge += z * z;
                }
            }
            let linear = alpha * s.n_treated + slope.iter().zip(&s.treated_sum).map(|(a, b)| a * b).sum::<f64>();
            total += hinge / (2.0 * s.lambda) - linear;
            total += 0.5 * self.shrinkage(params, g);
        }
        total
    }

    fn shrinkage(&self, params: &DualParams, g: usize) -> f64 {
        match self.pooling {
            Pooling::Partial => params.beta[g].iter().zip(&params.mu).map(|(b, m)| (b - m) * (b - m)).sum(),
            Pooling::None => params.beta[g].iter().map(|b| b * b).sum(),
            Pooling::Full => 0.0,
        }
    }

    pub fn gradient(&self, params: &DualParams) -> DualParams {
        let k = self.k();
        let p = self.p;
        let mut grad = DualParams::zeros(k, p);
        for (g, s) in self.strata.iter().enumerate() {
            let alpha = params.alpha[g];
            let slope = self.slope(params, g);
            let mut ga = -s.n_treated;
            let mut gb: Vec<f64> = s.treated_sum.iter().map(|v| -v).collect();
            for r in 0..s.controls.len() {
                let z = self.index(alpha, slope, s, r);
                if z > 0.0 {
                    let w = z / s.lambda;
                    ga += w;
                    for (gj, x) in gb.iter_mut().zip(&s.phi[r * p..(r + 1) * p]) {
                        *gj += w * x;
                    }
                }
            }
            grad.alpha[g] = ga;
            match self.pooling {
                Pooling::Partial => {
                    for j in 0..p {
                        let dev = params.beta[g][j] - params.mu[j];
                        grad.beta[g][j] = gb[j] + dev;
                        grad.mu[j] -= dev;
                    }
                }
                Pooling::None => {
                    for j in 0..p {
                        grad.beta[g][j] = gb[j] + params.beta[g][j];
                    }
                }
                Pooling::Full => {
                    for j in 0..p {
                        grad.mu[j] += gb[j];
                    }
                }
            }
        }
        grad
    }

    /// Generalized Hessian in block-arrow form, with `damping` added to the
    /// diagonal. Controls with a nonnegative index count as active.
    pub fn newton_system(&self, params: &DualParams, damping: f64) -> ArrowSystem {
        let p = self.p;
        let k = self.k();
        let mut blocks = Vec::with_capacity(k);
        let mut couplings = Vec::with_capacity(k);
        let corner_dim = if self.pooling == Pooling::None { 0 } else { p };
        let mut corner = DMatrix::zeros(corner_dim, corner_dim);
        for (g, s) in self.strata.iter().enumerate() {
            let alpha = params.alpha[g];
            let slope = self.slope(params, g);
            let inv = 1.0 / s.lambda;
            // accumulate sum over active controls of psi psi' with psi = (1, phi)
            let mut gram = DMatrix::<f64>::zeros(p + 1, p + 1);
            for r in 0..s.controls.len() {
                if self.index(alpha, slope, s, r) >= 0.0 {
                    let row = &s.phi[r * p..(r + 1) * p];
                    gram[(0, 0)] += 1.0;
                    for a in 0..p {
                        gram[(0, a + 1)] += row[a];
                        for b in a..p {
                            gram[(a + 1, b + 1)] += row[a] * row[b];
                        }
                    }
                }
            }
            for a in 0..=p {
                for b in 0..a {
                    gram[(a, b)] = gram[(b, a)];
                }
            }
            gram *= inv;
            match self.pooling {
                Pooling::Partial | Pooling::None => {
                    let mut block = gram;
                    for j in 1..=p {
                        block[(j, j)] += 1.0;
                    }
                    for j in 0..=p {
                        block[(j, j)] += damping;
                    }
                    blocks.push(block);
                    if self.pooling == Pooling::Partial {
                        let mut c = DMatrix::zeros(p + 1, p);
                        for j in 0..p {
                            c[(j + 1, j)] = -1.0;
                            corner[(j, j)] += 1.0;
                        }
                        couplings.push(c);
                    } else {
                        couplings.push(DMatrix::zeros(p + 1, 0));
                    }
                }
                Pooling::Full => {
                    blocks.push(DMatrix::from_element(1, 1, gram[(0, 0)] + damping));
                    couplings.push(gram.view((0, 1), (1, p)).into_owned());
                    corner += gram.view((1, 1), (p, p));
                }
            }
        }
        for j in 0..corner_dim {
            corner[(j, j)] += damping;
        }
        ArrowSystem { blocks, couplings, corner }
    }

    /// Newton direction `-H^{-1} grad`, expressed as a parameter update.
    pub fn newton_direction(&self, params: &DualParams, grad: &DualParams, damping: f64) -> Result<DualParams> {
        let p = self.p;
        let k = self.k();
        let system = self.newton_system(params, damping);
        let rhs_blocks: Vec<DVector<f64>> = (0..k)
            .map(|g| match self.pooling {
                Pooling::Full => DVector::from_element(1, -grad.alpha[g]),
                _ => {
                    let mut v = DVector::zeros(p + 1);
                    v[0] = -grad.alpha[g];
                    for j in 0..p {
                        v[j + 1] = -grad.beta[g][j];
                    }
                    v
                }
            })
            .collect();
        let rhs_corner = match self.pooling {
            Pooling::None => DVector::zeros(0),
            _ => DVector::from_iterator(p, grad.mu.iter().map(|v| -v)),
        };
        let (xs, y) = system.solve(&rhs_blocks, &rhs_corner)?;
        let mut dir = DualParams::zeros(k, p);
        for g in 0..k {
            dir.alpha[g] = xs[g][0];
            match self.pooling {
                Pooling::Full => dir.beta[g].copy_from_slice(y.as_slice()),
                _ => {
                    for j in 0..p {
                        dir.beta[g][j] = xs[g][j + 1];
                    }
                }
            }
        }
        if self.pooling != Pooling::None {
            dir.mu.copy_from_slice(y.as_slice());
        }
        Ok(dir)
    }

    /// Scale of the largest diagonal Hessian entry at zero, used to set damping.
    pub fn curvature_scale(&self) -> f64 {
        self.strata
            .iter()
            .map(|s| {
                let sq: f64 = s.phi.iter().map(|v| v * v).sum::<f64>() / self.p.max(1) as f64;
                (s.controls.len() as f64).max(sq) / s.lambda
            })
            .fold(1.0, f64::max)
    }

    /// Weights recovered from dual parameters, one per sample unit (treated
    /// units get 1).
    pub fn recover_weights(&self, params: &DualParams, n: usize) -> Vec<f64> {
        let mut gamma = vec![1.0; n];
        for (g, s) in self.strata.iter().enumerate() {
            let slope = self.slope(params, g);
            for (r, &i) in s.controls.iter().enumerate() {
                gamma[i] = self.index(params.alpha[g], slope, s, r).max(0.0) / s.lambda;
            }
        }
        gamma
    }

    /// Local imbalance vectors `E_g` in sum units.
    pub fn local_imbalance_sums(&self, gamma: &[f64]) -> Vec<Vec<f64>> {
        self.strata
            .iter()
            .map(|s| {
                let mut e: Vec<f64> = s.treated_sum.iter().map(|v| -v).collect();
                for (r, &i) in s.controls.iter().enumerate() {
                    for (ej, x) in e.iter_mut().zip(&s.phi[r * self.p..(r + 1) * self.p]) {
                        *ej += gamma[i] * x;
                    }
                }
                e
            })
            .collect()
    }

    /// Canonical primal value of `gamma`, without constraint checks.
    pub fn primal_value(&self, gamma: &[f64]) -> f64 {
        let local = self.local_imbalance_sums(gamma);
        self.strata
            .iter()
            .zip(&local)
            .map(|(s, e)| {
                let ridge: f64 = s.controls.iter().map(|&i| gamma[i] * gamma[i]).sum();
                let imbalance = match self.pooling {
                    Pooling::Full => 0.0,
                    _ => 0.5 * e.iter().map(|v| v * v).sum::<f64>(),
                };
                imbalance + 0.5 * s.lambda * ridge
            })
            .sum()
    }
}
