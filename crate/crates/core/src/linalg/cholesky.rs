use nalgebra::{DMatrix, DVector};

use super::{SymMatrix, PD_REL_TOL};
use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor `C = L Lᵀ` with an explicit pivot test.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Fails with `NotPositiveDefinite` when a pivot drops to
    /// `PD_REL_TOL · max(1, max diagonal)` or below.
    pub fn factor(c: &SymMatrix) -> Result<Self> {
        let a = c.as_matrix();
        let n = a.nrows();
        let scale = (0..n).fold(1.0_f64, |m, i| m.max(a[(i, i)].abs()));
        let tol = PD_REL_TOL * scale;
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut pivot = a[(j, j)];
            for k in 0..j {
                pivot -= l[(j, k)] * l[(j, k)];
            }
            if !(pivot > tol) {
                return Err(Error::NotPositiveDefinite { index: j, pivot });
            }
            let ljj = pivot.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// `L⁻¹ b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.l.nrows();
        let mut x = b.clone();
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= self.l[(i, k)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    /// `L⁻ᵀ b`.
    pub fn solve_upper(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.l.nrows();
        let mut x = b.clone();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * x[k];
            }
            x[i] = s / self.l[(i, i)];
        }
        x
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    pub fn solve_lower_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for (j, col) in b.column_iter().enumerate() {
            out.set_column(j, &self.solve_lower(&col.into_owned()));
        }
        out
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for (j, col) in b.column_iter().enumerate() {
            out.set_column(j, &self.solve(&col.into_owned()));
        }
        out
    }

    /// `L⁻¹ B L⁻ᵀ`.
    pub fn whiten(&self, b: &SymMatrix) -> SymMatrix {
        let left = self.solve_lower_matrix(b.as_matrix());
        let both = self.solve_lower_matrix(&left.transpose());
        SymMatrix::symmetrized(both)
    }
}
