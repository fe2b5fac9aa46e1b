//! Small dense linear-algebra helpers shared by the Newton-type solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative pivot floor below which a symmetric matrix is treated as singular.
const PIVOT_FLOOR: f64 = 1e-13;

/// Cholesky factorization that rejects numerically singular matrices.
pub(crate) fn spd_cholesky(a: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let scale = a.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let chol = Cholesky::new(a).ok_or_else(|| Error::Singular(format!("{what}: matrix is not positive definite")))?;
    let l = chol.l_dirty();
    for i in 0..l.nrows() {
        let piv = l[(i, i)] * l[(i, i)];
        if !(piv > PIVOT_FLOOR * scale) {
            return Err(Error::Singular(format!("{what}: pivot {i} is {piv:.3e} relative to scale {scale:.3e}")));
        }
    }
    Ok(chol)
}

/// Symmetric system with block-arrow structure:
///
/// ```text
/// [ D_1            B_1 ] [x_1]   [r_1]
/// [      ...       ... ] [...] = [...]
/// [           D_K  B_K ] [x_K]   [r_K]
/// [ B_1' ... B_K'  C   ] [ y ]   [ s ]
/// ```
///
/// Solved through the Schur complement `C - sum B_g' D_g^-1 B_g`, which costs
/// `O(K q^3 + m^3)` rather than `O((Kq + m)^3)`.
pub(crate) struct ArrowSystem {
    pub blocks: Vec<DMatrix<f64>>,
    pub couplings: Vec<DMatrix<f64>>,
    pub corner: DMatrix<f64>,
}

impl ArrowSystem {
    pub fn solve(&self, rhs_blocks: &[DVector<f64>], rhs_corner: &DVector<f64>) -> Result<(Vec<DVector<f64>>, DVector<f64>)> {
        let m = self.corner.nrows();
        let mut schur = self.corner.clone();
        let mut t = rhs_corner.clone();
        let mut partial = Vec::with_capacity(self.blocks.len());
        for (g, (d, b)) in self.blocks.iter().zip(&self.couplings).enumerate() {
            let chol = spd_cholesky(d.clone(), &format!("block {g}"))?;
            let dinv_r = chol.solve(&rhs_blocks[g]);
            let dinv_b = if m > 0 { chol.solve(b) } else { DMatrix::zeros(d.nrows(), 0) };
            if m > 0 {
                schur -= b.transpose() * &dinv_b;
                t -= b.transpose() * &dinv_r;
            }
            partial.push((dinv_r, dinv_b));
        }
        let y = if m > 0 {
            spd_cholesky(schur, "schur complement")?.solve(&t)
        } else {
            DVector::zeros(0)
        };
        let xs = partial
            .into_iter()
            .map(|(dinv_r, dinv_b)| if m > 0 { dinv_r - dinv_b * &y } else { dinv_r })
            .collect();
        Ok((xs, y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arrow_matches_dense_solve() {
        let blocks = vec![
            DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]),
            DMatrix::from_row_slice(1, 1, &[5.0]),
        ];
        let couplings = vec![
            DMatrix::from_row_slice(2, 2, &[0.5, -0.2, 0.1, 0.3]),
            DMatrix::from_row_slice(1, 2, &[-0.4, 0.2]),
        ];
        let corner = DMatrix::from_row_slice(2, 2, &[6.0, 0.5, 0.5, 7.0]);
        let sys = ArrowSystem { blocks: blocks.clone(), couplings: couplings.clone(), corner: corner.clone() };
        let r = vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![-1.0])];
        let s = DVector::from_vec(vec![0.5, 3.0]);
        let (xs, y) = sys.solve(&r, &s).unwrap();

        let mut full = DMatrix::zeros(5, 5);
        full.view_mut((0, 0), (2, 2)).copy_from(&blocks[0]);
        full.view_mut((2, 2), (1, 1)).copy_from(&blocks[1]);
        full.view_mut((0, 3), (2, 2)).copy_from(&couplings[0]);
        full.view_mut((2, 3), (1, 2)).copy_from(&couplings[1]);
        full.view_mut((3, 0), (2, 2)).copy_from(&couplings[0].transpose());
        full.view_mut((3, 2), (2, 1)).copy_from(&couplings[1].transpose());
        full.view_mut((3, 3), (2, 2)).copy_from(&corner);
        let rhs = DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5, 3.0]);
        let dense = full.lu().solve(&rhs).unwrap();
        let got = [xs[0][0], xs[0][1], xs[1][0], y[0], y[1]];
        for (a, b) in got.iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_block_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(spd_cholesky(a, "test").is_err());
    }
}
