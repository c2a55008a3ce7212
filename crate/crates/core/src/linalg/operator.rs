//! Structured system matrices.
//!
//! The turbulence model has block-diagonal dynamics, a diagonal noise
//! covariance and a scaled-identity observation. Keeping that structure lets
//! a filter step run in time linear in the state dimension.

use nalgebra::{DMatrix, DVector};

use super::{Cholesky, SymMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Operator {
    Dense(DMatrix<f64>),
    /// Square diagonal blocks laid out along the main diagonal.
    BlockDiagonal(Vec<DMatrix<f64>>),
    ScaledIdentity {
        dim: usize,
        scale: f64,
    },
}

impl Operator {
    pub fn identity(dim: usize) -> Self {
        Operator::ScaledIdentity { dim, scale: 1.0 }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Operator::Dense(DMatrix::zeros(rows, cols))
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        Operator::BlockDiagonal(diag.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect())
    }

    pub fn nrows(&self) -> usize {
        match self {
            Operator::Dense(m) => m.nrows(),
            Operator::BlockDiagonal(b) => b.iter().map(|m| m.nrows()).sum(),
            Operator::ScaledIdentity { dim, .. } => *dim,
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            Operator::Dense(m) => m.ncols(),
            Operator::BlockDiagonal(b) => b.iter().map(|m| m.ncols()).sum(),
            Operator::ScaledIdentity { dim, .. } => *dim,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Operator::Dense(m) => m.clone(),
            Operator::BlockDiagonal(blocks) => {
                let n = self.nrows();
                let mut out = DMatrix::zeros(n, n);
                let mut off = 0;
                for b in blocks {
                    let k = b.nrows();
                    out.view_mut((off, off), (k, k)).copy_from(b);
                    off += k;
                }
                out
            }
            Operator::ScaledIdentity { dim, scale } => DMatrix::identity(*dim, *dim) * *scale,
        }
    }

    /// Interprets a symmetric operator as a [`SymMatrix`].
    pub fn to_sym(&self) -> SymMatrix {
        SymMatrix::symmetrized(self.to_dense())
    }

    pub fn transpose(&self) -> Operator {
        match self {
            Operator::Dense(m) => Operator::Dense(m.transpose()),
            Operator::BlockDiagonal(b) => Operator::BlockDiagonal(b.iter().map(|m| m.transpose()).collect()),
            s @ Operator::ScaledIdentity { .. } => s.clone(),
        }
    }

    pub fn scaled(&self, s: f64) -> Operator {
        match self {
            Operator::Dense(m) => Operator::Dense(m * s),
            Operator::BlockDiagonal(b) => Operator::BlockDiagonal(b.iter().map(|m| m * s).collect()),
            Operator::ScaledIdentity { dim, scale } => Operator::ScaledIdentity {
                dim: *dim,
                scale: scale * s,
            },
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Operator::Dense(m) => m.iter().all(|v| *v == 0.0),
            Operator::BlockDiagonal(b) => b.iter().all(|m| m.iter().all(|v| *v == 0.0)),
            Operator::ScaledIdentity { scale, .. } => *scale == 0.0,
        }
    }

    /// Block sizes when the operator is block diagonal (scaled identity
    /// counts as 1×1 blocks), `None` for dense.
    pub fn block_sizes(&self) -> Option<Vec<usize>> {
        match self {
            Operator::Dense(_) => None,
            Operator::BlockDiagonal(b) => Some(b.iter().map(|m| m.nrows()).collect()),
            Operator::ScaledIdentity { dim, .. } => Some(vec![1; *dim]),
        }
    }

    /// Re-expresses the operator as blocks of the given layout, provided its
    /// own block boundaries refine that layout.
    pub fn as_blocks(&self, layout: &[usize]) -> Option<Vec<DMatrix<f64>>> {
        match self {
            Operator::Dense(_) => None,
            Operator::ScaledIdentity { scale, .. } => {
                Some(layout.iter().map(|&k| DMatrix::identity(k, k) * *scale).collect())
            }
            Operator::BlockDiagonal(blocks) => {
                let mut out = Vec::with_capacity(layout.len());
                let mut src = blocks.iter().peekable();
                for &k in layout {
                    let mut m = DMatrix::zeros(k, k);
                    let mut filled = 0;
                    while filled < k {
                        let b = src.next()?;
                        let bk = b.nrows();
                        if filled + bk > k {
                            return None;
                        }
                        m.view_mut((filled, filled), (bk, bk)).copy_from(b);
                        filled += bk;
                    }
                    out.push(m);
                }
                if src.next().is_some() {
                    return None;
                }
                Some(out)
            }
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Operator::Dense(m) => m * x,
            Operator::BlockDiagonal(blocks) => {
                let mut out = DVector::zeros(x.len());
                let mut off = 0;
                for b in blocks {
                    let k = b.nrows();
                    let seg = b * x.rows(off, k);
                    out.rows_mut(off, k).copy_from(&seg);
                    off += k;
                }
                out
            }
            Operator::ScaledIdentity { scale, .. } => x * *scale,
        }
    }

    pub fn apply_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Operator::Dense(m) => m * x,
            Operator::BlockDiagonal(blocks) => {
                let mut out = DMatrix::zeros(x.nrows(), x.ncols());
                let mut off = 0;
                for b in blocks {
                    let k = b.nrows();
                    let seg = b * x.rows(off, k);
                    out.rows_mut(off, k).copy_from(&seg);
                    off += k;
                }
                out
            }
            Operator::ScaledIdentity { scale, .. } => x * *scale,
        }
    }

    pub fn apply_t(&self, y: &DVector<f64>) -> DVector<f64> {
        match self {
            Operator::Dense(m) => m.tr_mul(y),
            _ => self.transpose().apply(y),
        }
    }

    pub fn apply_t_mat(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Operator::Dense(m) => m.tr_mul(y),
            _ => self.transpose().apply_mat(y),
        }
    }

    /// Solver for `(I + s·H Hᵀ) x = y`.
    pub fn observation_solver(&self, s: f64) -> Result<ObsSolver> {
        match self {
            Operator::ScaledIdentity { scale, .. } => Ok(ObsSolver::Scalar(1.0 / (1.0 + s * scale * scale))),
            Operator::BlockDiagonal(blocks) => {
                let mut out = Vec::with_capacity(blocks.len());
                for b in blocks {
                    let m = SymMatrix::symmetrized(b * b.transpose() * s).add_identity(1.0);
                    out.push(m.cholesky()?);
                }
                Ok(ObsSolver::Blocks(out))
            }
            Operator::Dense(m) => {
                if m.nrows() == 0 {
                    return Ok(ObsSolver::Scalar(1.0));
                }
                let g = SymMatrix::symmetrized(m * m.transpose() * s).add_identity(1.0);
                Ok(ObsSolver::Dense(g.cholesky()?))
            }
        }
    }

    pub(crate) fn check_compose(&self, d: usize, what: &str) -> Result<()> {
        if self.ncols() != d {
            return Err(Error::dims(format!(
                "{what} has {} columns, expected {d}",
                self.ncols()
            )));
        }
        Ok(())
    }
}

/// Factorization of `I + s·H Hᵀ`.
#[derive(Debug, Clone)]
pub enum ObsSolver {
    Scalar(f64),
    Blocks(Vec<Cholesky>),
    Dense(Cholesky),
}

impl ObsSolver {
    pub fn solve(&self, y: &DVector<f64>) -> DVector<f64> {
        match self {
            ObsSolver::Scalar(inv) => y * *inv,
            ObsSolver::Blocks(chols) => {
                let mut out = DVector::zeros(y.len());
                let mut off = 0;
                for c in chols {
                    let k = c.l().nrows();
                    let seg = c.solve(&y.rows(off, k).into_owned());
                    out.rows_mut(off, k).copy_from(&seg);
                    off += k;
                }
                out
            }
            ObsSolver::Dense(c) => c.solve(y),
        }
    }

    pub fn solve_mat(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            ObsSolver::Scalar(inv) => y * *inv,
            _ => {
                let mut out = DMatrix::zeros(y.nrows(), y.ncols());
                for (j, col) in y.column_iter().enumerate() {
                    out.set_column(j, &self.solve(&col.into_owned()));
                }
                out
            }
        }
    }
}
