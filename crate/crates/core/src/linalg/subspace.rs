//! Block power iteration for the leading eigenpairs of a symmetric operator
//! that is only available through matrix products.

use nalgebra::{DMatrix, DVector};

use super::{normalize_sign, orthonormal_basis, SymMatrix};

/// Residual tolerance on `‖A v − θ v‖ / max(1, |θ|)`.
pub const RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct Eigenpairs {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Shift that makes `m + shift·I` positive semidefinite (Gershgorin bound).
pub fn gershgorin_shift(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let lower = (0..n)
        .map(|i| {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| m[(i, j)].abs()).sum();
            m[(i, i)] - off
        })
        .fold(f64::INFINITY, f64::min);
    (-lower).max(0.0)
}

/// Leading `count` eigenpairs of the symmetric operator `apply`.
///
/// Runs power iteration on a block of `count + guard` vectors with a
/// Rayleigh–Ritz step every sweep; converged leading vectors are locked and
/// deflated out of the active block. `shift` is added to the operator so that
/// the dominant eigenvalues in magnitude are the largest algebraic ones.
pub fn top_eigenpairs<F>(dim: usize, count: usize, apply: F, shift: f64) -> Eigenpairs
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    let count = count.min(dim);
    let block = (count + count.max(8)).min(dim);
    let max_iter = 10 * dim;
    let shifted = |x: &DMatrix<f64>| apply(x) + x * shift;

    // Deterministic start: a fixed pseudo-random block.
    let mut state = 0x2545_F491_4F6C_DD1Du64;
    let start = DMatrix::from_fn(dim, block, |_, _| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    });
    let mut x = orthonormal_basis(&start);
    let mut locked: Vec<(f64, DVector<f64>)> = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        iterations += 1;
        deflate(&mut x, &locked);
        x = orthonormal_basis(&x);
        if x.ncols() == 0 {
            break;
        }
        let y = shifted(&x);
        let h = SymMatrix::symmetrized(x.transpose() * &y);
        let e = h.eigen();
        let ritz_x = &x * &e.eigenvectors;
        let ritz_y = &y * &e.eigenvectors;
        let need = count - locked.len();
        let mut newly = 0;
        for i in 0..need.min(ritz_x.ncols()) {
            let theta = e.eigenvalues[i];
            let r = ritz_y.column(i) - ritz_x.column(i) * theta;
            let value = theta - shift;
            if r.norm() <= RESIDUAL_TOL * value.abs().max(1.0) {
                newly += 1;
            } else {
                break;
            }
        }
        for i in 0..newly {
            locked.push((e.eigenvalues[i] - shift, ritz_x.column(i).into_owned()));
        }
        if locked.len() >= count {
            converged = true;
            break;
        }
        let active = ritz_y.columns(newly, ritz_y.ncols() - newly).into_owned();
        x = active;
    }

    if !converged {
        // Fill the remainder with the best current Ritz vectors.
        deflate(&mut x, &locked);
        let x = orthonormal_basis(&x);
        let y = shifted(&x);
        let h = SymMatrix::symmetrized(x.transpose() * &y);
        let e = h.eigen();
        let ritz_x = &x * &e.eigenvectors;
        let mut i = 0;
        while locked.len() < count && i < ritz_x.ncols() {
            locked.push((e.eigenvalues[i] - shift, ritz_x.column(i).into_owned()));
            i += 1;
        }
    }

    locked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut vectors = DMatrix::zeros(dim, locked.len());
    let mut values = Vec::with_capacity(locked.len());
    for (j, (v, vec)) in locked.into_iter().enumerate() {
        values.push(v);
        vectors.set_column(j, &normalize_sign(vec));
    }
    Eigenpairs {
        values,
        vectors,
        iterations,
        converged,
    }
}

fn deflate(x: &mut DMatrix<f64>, locked: &[(f64, DVector<f64>)]) {
    for j in 0..x.ncols() {
        let mut col = x.column(j).into_owned();
        for (_, q) in locked {
            let dot = q.dot(&col);
            col.axpy(-dot, q, 1.0);
        }
        x.set_column(j, &col);
    }
}
