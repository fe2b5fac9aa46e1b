//! Linear predictors `a_g + x'(b + d_g)` with per-stratum intercepts, a shared
//! slope `b`, and optional per-stratum slope deviations `d_g`.
//!
//! Penalized least-squares and Newton systems for this model have block-arrow
//! structure: one block per stratum for `(a_g, d_g)` and a corner for `b`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::ArrowSystem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlopeStructure {
    /// Shared slope plus a penalized deviation per stratum.
    Interacted,
    /// Shared slope only.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearCoefficients {
    pub structure: SlopeStructure,
    pub intercepts: Vec<f64>,
    pub shared: Vec<f64>,
    /// Empty for [`SlopeStructure::Shared`].
    pub deviations: Vec<Vec<f64>>,
}

impl LinearCoefficients {
    pub fn zeros(structure: SlopeStructure, k: usize, p: usize) -> Self {
        let deviations = match structure {
            SlopeStructure::Interacted => vec![vec![0.0; p]; k],
            SlopeStructure::Shared => Vec::new(),
        };
        Self { structure, intercepts: vec![0.0; k], shared: vec![0.0; p], deviations }
    }

    pub fn predict(&self, x: &[f64], g: usize) -> f64 {
        let mut eta = self.intercepts[g];
        match self.deviations.get(g) {
            Some(d) => {
                for ((xj, b), dj) in x.iter().zip(&self.shared).zip(d) {
                    eta += xj * (b + dj);
                }
            }
            None => {
                for (xj, b) in x.iter().zip(&self.shared) {
                    eta += xj * b;
                }
            }
        }
        eta
    }

    /// Slope of stratum `g`, `b + d_g`.
    pub fn slope(&self, g: usize) -> Vec<f64> {
        match self.deviations.get(g) {
            Some(d) => self.shared.iter().zip(d).map(|(b, d)| b + d).collect(),
            None => self.shared.clone(),
        }
    }

    /// Squared norm of the penalized (slope) part.
    pub(crate) fn penalized_norm_sq(&self) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        sq(&self.shared) + self.deviations.iter().map(|d| sq(d)).sum::<f64>()
    }

    pub(crate) fn axpy(&self, t: f64, dir: &Self) -> Self {
        let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + t * y).collect::<Vec<_>>();
        Self {
            structure: self.structure,
            intercepts: add(&self.intercepts, &dir.intercepts),
            shared: add(&self.shared, &dir.shared),
            deviations: self.deviations.iter().zip(&dir.deviations).map(|(a, b)| add(a, b)).collect(),
        }
    }

    pub(crate) fn norm(&self) -> f64 {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        (sq(&self.intercepts) + self.penalized_norm_sq()).sqrt()
    }

    pub(crate) fn is_finite(&self) -> bool {
        self.intercepts.iter().chain(&self.shared).chain(self.deviations.iter().flatten()).all(|v| v.is_finite())
    }
}

/// Rows of a feature matrix used in one fit, with their strata.
pub(crate) struct Design<'a> {
    pub x: &'a DMatrix<f64>,
    pub rows: Vec<usize>,
    pub strata: Vec<usize>,
    pub k: usize,
    pub structure: SlopeStructure,
}

impl<'a> Design<'a> {
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    fn block_size(&self) -> usize {
        match self.structure {
            SlopeStructure::Interacted => 1 + self.p(),
            SlopeStructure::Shared => 1,
        }
    }

    pub fn row(&self, r: usize) -> Vec<f64> {
        self.x.row(self.rows[r]).iter().copied().collect()
    }

    pub fn linear_predictors(&self, coefs: &LinearCoefficients) -> Vec<f64> {
        (0..self.rows.len()).map(|r| coefs.predict(&self.row(r), self.strata[r])).collect()
    }

    /// `sum_r v_r x~_r`, arranged like the coefficients.
    pub fn score(&self, v: &[f64]) -> LinearCoefficients {
        let p = self.p();
        let mut out = LinearCoefficients::zeros(self.structure, self.k, p);
        for (r, &vr) in v.iter().enumerate() {
            let g = self.strata[r];
            let x = self.x.row(self.rows[r]);
            out.intercepts[g] += vr;
            for j in 0..p {
                out.shared[j] += vr * x[j];
            }
            if let Some(d) = out.deviations.get_mut(g) {
                for j in 0..p {
                    d[j] += vr * x[j];
                }
            }
        }
        out
    }

    /// Solves `(sum_r w_r x~_r x~_r' + penalty P) theta = score(v) - penalty P shrink`
    /// where `P` selects the slope coordinates. Strata without rows get their
    /// intercept pinned to zero.
    pub fn solve(&self, w: &[f64], v: &[f64], penalty: f64, shrink: Option<&LinearCoefficients>) -> Result<LinearCoefficients> {
        let p = self.p();
        if penalty == 0.0 && self.structure == SlopeStructure::Interacted && p > 0 {
            return Err(Error::Singular(
                "shared slope and stratum deviations are not identified at zero penalty; use a positive ridge penalty".into(),
            ));
        }
        let q = self.block_size();
        let mut blocks = vec![DMatrix::<f64>::zeros(q, q); self.k];
        let mut couplings = vec![DMatrix::<f64>::zeros(q, p); self.k];
        let mut corner = DMatrix::<f64>::identity(p, p) * penalty;
        let mut occupied = vec![false; self.k];
        for (r, &wr) in w.iter().enumerate() {
            let g = self.strata[r];
            occupied[g] = true;
            let x = self.x.row(self.rows[r]);
            let mut xt = Vec::with_capacity(q);
            xt.push(1.0);
            if self.structure == SlopeStructure::Interacted {
                xt.extend(x.iter());
            }
            let block = &mut blocks[g];
            for a in 0..q {
                let wa = wr * xt[a];
                for b in 0..=a {
                    block[(a, b)] += wa * xt[b];
                }
                let coupling = &mut couplings[g];
                for j in 0..p {
                    coupling[(a, j)] += wa * x[j];
                }
            }
            for i in 0..p {
                let wi = wr * x[i];
                for j in 0..=i {
                    corner[(i, j)] += wi * x[j];
                }
            }
        }
        for (g, block) in blocks.iter_mut().enumerate() {
            if !occupied[g] {
                block[(0, 0)] = 1.0;
            }
            for a in 1..q {
                block[(a, a)] += penalty;
            }
            block.fill_upper_triangle_with_lower_triangle();
        }
        corner.fill_upper_triangle_with_lower_triangle();

        let rhs = self.score(v);
        let mut rhs_blocks = Vec::with_capacity(self.k);
        for g in 0..self.k {
            let mut b = DVector::zeros(q);
            b[0] = rhs.intercepts[g];
            if let Some(d) = rhs.deviations.get(g) {
                for j in 0..p {
                    b[1 + j] = d[j] - penalty * shrink.map_or(0.0, |s| s.deviations[g][j]);
                }
            }
            rhs_blocks.push(b);
        }
        let rhs_corner =
            DVector::from_fn(p, |j, _| rhs.shared[j] - penalty * shrink.map_or(0.0, |s| s.shared[j]));

        let system = ArrowSystem { blocks, couplings, corner };
        let (xb, xc) = system.solve(&rhs_blocks, &rhs_corner).map_err(|e| match e {
            Error::Singular(m) => Error::Singular(format!("{m}; use a positive ridge penalty")),
            other => other,
        })?;
        let mut out = LinearCoefficients::zeros(self.structure, self.k, p);
        for g in 0..self.k {
            out.intercepts[g] = xb[g][0];
            if let Some(d) = out.deviations.get_mut(g) {
                for j in 0..p {
                    d[j] = xb[g][1 + j];
                }
            }
        }
        out.shared = xc.iter().copied().collect();
        Ok(out)
    }
}

/// Fold label per row, balanced within each stratum.
pub(crate) fn stratified_folds<R: Rng>(strata: &[usize], k: usize, folds: usize, rng: &mut R) -> Vec<usize> {
    let mut out = vec![0; strata.len()];
    for g in 0..k {
        let mut members: Vec<usize> = (0..strata.len()).filter(|&r| strata[r] == g).collect();
        members.shuffle(rng);
        let offset = rng.random_range(0..folds);
        for (pos, &r) in members.iter().enumerate() {
            out[r] = (offset + pos) % folds;
        }
    }
    out
}

/// Cross-validated loss at one penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvPoint {
    pub penalty: f64,
    /// Mean held-out loss per unit.
    pub loss: f64,
}

pub const DEFAULT_PENALTY_GRID: [f64; 6] = [1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0];
pub const DEFAULT_FOLDS: usize = 5;

pub(crate) fn validate_grid(grid: &[f64], folds: usize) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("penalty grid is empty".into()));
    }
    if grid.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument("penalties must be finite and nonnegative".into()));
    }
    if grid.len() > 1 && folds < 2 {
        return Err(Error::InvalidArgument("cross-validation needs at least 2 folds".into()));
    }
    Ok(())
}

/// Smallest-loss penalty; ties go to the earlier grid entry.
pub(crate) fn select_penalty(curve: &[CvPoint]) -> f64 {
    let mut best = curve[0];
    for c in &curve[1..] {
        if c.loss < best.loss {
            best = *c;
        }
    }
    best.penalty
}

/// K-fold cross-validation over `grid`.
///
/// `fit(train, penalty)` returns coefficients for the training positions;
/// `loss(coefs, r)` is the held-out loss of position `r`. Held-out rows whose
/// stratum is absent from the training folds are skipped.
pub(crate) fn cross_validate<F, L>(
    strata: &[usize],
    k: usize,
    grid: &[f64],
    folds: &[usize],
    fold_count: usize,
    fit: F,
    loss: L,
) -> Result<Vec<CvPoint>>
where
    F: Fn(&[usize], f64) -> Result<LinearCoefficients> + Sync,
    L: Fn(&LinearCoefficients, usize) -> f64 + Sync,
{
    use rayon::prelude::*;
    let tasks: Vec<(usize, usize)> = (0..grid.len()).flat_map(|a| (0..fold_count).map(move |f| (a, f))).collect();
    let results: Vec<Result<(f64, usize)>> = tasks
        .par_iter()
        .map(|&(a, f)| {
            let train: Vec<usize> = (0..strata.len()).filter(|&r| folds[r] != f).collect();
            let mut seen = vec![false; k];
            for &r in &train {
                seen[strata[r]] = true;
            }
            let coefs = fit(&train, grid[a])?;
            let mut total = 0.0;
            let mut count = 0;
            for r in (0..strata.len()).filter(|&r| folds[r] == f && seen[strata[r]]) {
                total += loss(&coefs, r);
                count += 1;
            }
            Ok((total, count))
        })
        .collect();
    let mut curve = Vec::with_capacity(grid.len());
    for (a, &penalty) in grid.iter().enumerate() {
        let mut total = 0.0;
        let mut count = 0;
        for f in 0..fold_count {
            let (t, c) = match &results[a * fold_count + f] {
                Ok(v) => *v,
                Err(e) => return Err(Error::Numeric(format!("cross-validation fit at penalty {penalty} failed: {e}"))),
            };
            total += t;
            count += c;
        }
        if count == 0 {
            return Err(Error::InvalidArgument("cross-validation produced no held-out rows".into()));
        }
        curve.push(CvPoint { penalty, loss: total / count as f64 });
    }
    Ok(curve)
}
