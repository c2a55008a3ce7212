//! Random matrix generators shared by the experiments and the test suites.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::{orthonormal_basis, SymMatrix};
use crate::rng::standard_normal_matrix;

/// `d × p` matrix with orthonormal columns, uniformly distributed.
pub fn random_orthonormal(rng: &mut ChaCha8Rng, d: usize, p: usize) -> DMatrix<f64> {
    loop {
        let g = standard_normal_matrix(rng, d, p);
        let q = orthonormal_basis(&g);
        if q.ncols() == p {
            return q;
        }
    }
}

/// PSD matrix of the given rank with eigenvalues drawn from `[lo, hi]`.
pub fn random_psd(rng: &mut ChaCha8Rng, d: usize, rank: usize, lo: f64, hi: f64) -> SymMatrix {
    if rank == 0 {
        return SymMatrix::zeros(d);
    }
    let q = random_orthonormal(rng, d, rank);
    let mut f = q.clone();
    for j in 0..rank {
        let s: f64 = rng.gen_range(lo..=hi);
        f.column_mut(j).scale_mut(s.sqrt());
    }
    SymMatrix::from_factor(&f)
}

/// Full-rank PD matrix with eigenvalues in `[lo, hi]`.
pub fn random_pd(rng: &mut ChaCha8Rng, d: usize, lo: f64, hi: f64) -> SymMatrix {
    random_psd(rng, d, d, lo, hi)
}

/// Symmetric matrix with i.i.d. Gaussian upper triangle.
pub fn random_symmetric(rng: &mut ChaCha8Rng, d: usize) -> SymMatrix {
    let g = standard_normal_matrix(rng, d, d);
    SymMatrix::symmetrized(&g + g.transpose())
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    standard_normal_matrix(rng, rows, cols)
}
