//! Synthetic data-generating process with correlated, binary and skewed
//! covariates, binned subgroups, and group-specific logistic treatment and
//! linear outcome models.

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::spline::sorted_quantile;
use crate::error::{Error, Result};
use crate::estimators::sigmoid;

/// One-based columns dichotomized at their 80th percentile.
pub const DICHOTOMIZED: [usize; 5] = [1, 11, 21, 32, 41];
/// One-based columns replaced by `exp(x)`. Column 32 is dichotomized instead.
pub const EXPONENTIATED: [usize; 10] = [2, 7, 12, 17, 22, 27, 32, 37, 42, 47];

/// Raw and transformed covariates with the covariance they were drawn from.
#[derive(Debug, Clone)]
pub struct Covariates {
    pub raw: DMatrix<f64>,
    pub transformed: DMatrix<f64>,
    /// `Q Sigma Q'`.
    pub covariance: DMatrix<f64>,
    /// Diagonal of `Sigma`.
    pub spectrum: Vec<f64>,
}

/// `Sigma_jj = (d - j + 1)^5 / d^5` for one-based `j`.
pub fn base_spectrum(d: usize) -> Vec<f64> {
    let dd = (d as f64).powi(5);
    (1..=d).map(|j| ((d - j + 1) as f64).powi(5) / dd).collect()
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `R`'s diagonal folded into `Q`.
pub fn random_orthogonal<R: Rng>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Which transformation a one-based column receives.
pub fn column_transform(j: usize) -> Option<&'static str> {
    if DICHOTOMIZED.contains(&j) {
        Some("dichotomize")
    } else if EXPONENTIATED.contains(&j) {
        Some("exp")
    } else {
        None
    }
}

pub fn gen_covariates<R: Rng>(n: usize, d: usize, rng: &mut R) -> Result<Covariates> {
    if d == 0 || n <= d {
        return Err(Error::InvalidArgument(format!("need n > d > 0, got n = {n}, d = {d}")));
    }
    let spectrum = base_spectrum(d);
    let q = random_orthogonal(d, rng);
    let mut factor = q.clone();
    for (j, s) in spectrum.iter().enumerate() {
        factor.column_mut(j).scale_mut(s.sqrt());
    }
    let mut covariance = &factor * factor.transpose();
    covariance = (&covariance + covariance.transpose()) * 0.5;
    let z = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let raw = z * factor.transpose();
    let mut transformed = raw.clone();
    for j in 1..=d {
        let col = j - 1;
        match column_transform(j) {
            Some("dichotomize") => {
                let mut sorted: Vec<f64> = raw.column(col).iter().copied().collect();
                sorted.sort_by(|a, b| a.total_cmp(b));
                let cut = sorted_quantile(&sorted, 0.8);
                for i in 0..n {
                    transformed[(i, col)] = f64::from(raw[(i, col)] >= cut);
                }
            }
            Some(_) => {
                for i in 0..n {
                    transformed[(i, col)] = raw[(i, col)].exp();
                }
            }
            None => {}
        }
    }
    Ok(Covariates { raw, transformed, covariance, spectrum })
}

/// Bins `x` into `groups` contiguous groups. Cut points are `groups - 1`
/// distinct draws from the order statistics at ranks `groups, 2 groups, ...`,
/// so every group holds at least `groups` units; labels increase with `x`.
pub fn assign_groups<R: Rng>(x: &[f64], groups: usize, rng: &mut R) -> Result<Vec<usize>> {
    let n = x.len();
    if groups < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 groups, got {groups}")));
    }
    let candidates = (n / groups).saturating_sub(1);
    if candidates < groups - 1 {
        return Err(Error::InvalidArgument(format!(
            "{n} units give {candidates} candidate cuts, fewer than the {} needed",
            groups - 1
        )));
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    for _ in 0..100 {
        let mut picks: Vec<usize> = sample_indices(rng, candidates, groups - 1).into_vec();
        picks.sort_unstable();
        let cuts: Vec<f64> = picks.iter().map(|&m| sorted[(m + 1) * groups]).collect();
        let labels: Vec<usize> = x.iter().map(|v| cuts.partition_point(|c| c <= v)).collect();
        let mut counts = vec![0usize; groups];
        for &l in &labels {
            counts[l] += 1;
        }
        if counts.iter().all(|&c| c > 0) {
            return Ok(labels);
        }
    }
    Err(Error::DegenerateStratum("ties in the grouping variable left a group empty after 100 draws".into()))
}

/// Parameters of the treatment and outcome models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpParameters {
    pub alpha: Vec<f64>,
    pub eta0: Vec<f64>,
    pub mu_beta: Vec<f64>,
    pub mu_eta: Vec<f64>,
    pub u_beta: Vec<Vec<f64>>,
    pub u_eta: Vec<Vec<f64>>,
    pub b_beta: Vec<Vec<bool>>,
    pub b_eta: Vec<Vec<bool>>,
}

impl DgpParameters {
    pub fn draw<R: Rng>(groups: usize, d: usize, rng: &mut R) -> Self {
        let scale = 3.0 / (d as f64).sqrt();
        let normal = |rng: &mut R| rng.sample::<f64, _>(StandardNormal);
        let alpha = (0..groups).map(|_| normal(rng)).collect();
        let eta0 = (0..groups).map(|_| normal(rng)).collect();
        let mu_beta = (0..d).map(|_| if rng.random_bool(0.5) { scale } else { -scale }).collect();
        let mu_eta = (0..d).map(|_| if rng.random_bool(0.5) { scale } else { -scale }).collect();
        let u_beta = (0..groups).map(|_| (0..d).map(|_| normal(rng)).collect()).collect();
        let u_eta = (0..groups).map(|_| (0..d).map(|_| normal(rng)).collect()).collect();
        let b_beta = (0..groups).map(|_| (0..d).map(|_| rng.random_bool(0.25)).collect()).collect();
        let b_eta = (0..groups).map(|_| (0..d).map(|_| rng.random_bool(0.25)).collect()).collect();
        Self { alpha, eta0, mu_beta, mu_eta, u_beta, u_eta, b_beta, b_eta }
    }

    /// `mu + U_g * B_g`.
    fn slope(mu: &[f64], u: &[f64], b: &[bool]) -> Vec<f64> {
        mu.iter().zip(u).zip(b).map(|((m, u), &b)| if b { m + u } else { *m }).collect()
    }

    pub fn propensity_slope(&self, g: usize) -> Vec<f64> {
        Self::slope(&self.mu_beta, &self.u_beta[g], &self.b_beta[g])
    }

    pub fn outcome_slope(&self, g: usize) -> Vec<f64> {
        Self::slope(&self.mu_eta, &self.u_eta[g], &self.b_eta[g])
    }
}

#[derive(Debug, Clone)]
pub struct DgpDraw {
    pub covariates: Covariates,
    pub groups: Vec<usize>,
    pub treated: Vec<bool>,
    pub propensity: Vec<f64>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub tau: Vec<f64>,
    pub parameters: DgpParameters,
}

impl DgpDraw {
    pub fn observed(&self) -> Vec<f64> {
        self.treated.iter().enumerate().map(|(i, &t)| if t { self.y1[i] } else { self.y0[i] }).collect()
    }
}

/// Unit effect `X_d - X_3 + 0.3 X_d X_3` on one-based raw columns.
pub fn unit_effect(raw_row: &[f64]) -> f64 {
    let xd = raw_row[raw_row.len() - 1];
    let x3 = raw_row[2];
    xd - x3 + 0.3 * xd * x3
}

/// Draws treatment and potential outcomes. The models read `model_x`
/// (normally the transformed covariates); effects use the raw ones.
pub fn gen_treatment_and_outcomes<R: Rng, S: Rng>(
    covariates: Covariates,
    model_x: &DMatrix<f64>,
    groups: Vec<usize>,
    parameters: DgpParameters,
    treatment_rng: &mut R,
    noise_rng: &mut S,
    noise_sd: f64,
) -> Result<DgpDraw> {
    let (n, d) = covariates.raw.shape();
    if d < 3 {
        return Err(Error::InvalidArgument(format!("effects use column 3, got d = {d}")));
    }
    if model_x.shape() != (n, d) || groups.len() != n {
        return Err(Error::Dimension("covariates, model matrix and groups disagree".into()));
    }
    let k = parameters.alpha.len();
    if let Some(&g) = groups.iter().find(|&&g| g >= k) {
        return Err(Error::Dimension(format!("group {g} has no parameters")));
    }
    let beta: Vec<Vec<f64>> = (0..k).map(|g| parameters.propensity_slope(g)).collect();
    let eta: Vec<Vec<f64>> = (0..k).map(|g| parameters.outcome_slope(g)).collect();
    let mut treated = Vec::with_capacity(n);
    let mut propensity = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut tau = Vec::with_capacity(n);
    for i in 0..n {
        let g = groups[i];
        let x = model_x.row(i);
        let lin = parameters.alpha[g] + x.iter().zip(&beta[g]).map(|(a, b)| a * b).sum::<f64>();
        let e = sigmoid(lin);
        propensity.push(e);
        treated.push(treatment_rng.random_bool(e.clamp(0.0, 1.0)));
        let eps: f64 = noise_rng.sample(StandardNormal);
        let base = parameters.eta0[g] + x.iter().zip(&eta[g]).map(|(a, b)| a * b).sum::<f64>();
        let raw_row: Vec<f64> = covariates.raw.row(i).iter().copied().collect();
        let t = unit_effect(&raw_row);
        y0.push(base + noise_sd * eps);
        y1.push(base + noise_sd * eps + t);
        tau.push(t);
    }
    Ok(DgpDraw { covariates, groups, treated, propensity, y0, y1, tau, parameters })
}
