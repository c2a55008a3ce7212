//! Dense symmetric matrix kernel.
//!
//! Covariances live in [`SymMatrix`]. The Loewner order, Mahalanobis norms,
//! the Kalman gain and covariance-update operators, spectral projections and
//! positive parts are all defined here. The low-rank gain path lives in
//! [`woodbury`], structured system matrices in [`operator`].

mod cholesky;
pub mod operator;
pub mod subspace;
pub mod woodbury;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cholesky::Cholesky;
pub use operator::Operator;
pub use woodbury::{gain_apply_woodbury, KalmanGainContext};

/// Relative threshold for positive definiteness: `min eig > PD_REL_TOL * max(1, max eig)`.
pub const PD_REL_TOL: f64 = 1e-12;

/// Singular values below `PINV_REL_TOL * sigma_max` are treated as zero.
pub const PINV_REL_TOL: f64 = 1e-12;

/// Above this dimension the top-p projection switches from a full
/// eigendecomposition to block power iteration.
pub const DENSE_EIGEN_MAX_DIM: usize = 512;

/// Dense symmetric matrix. Symmetry is enforced exactly on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SymMatrix(DMatrix<f64>);

impl TryFrom<Vec<Vec<f64>>> for SymMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::dims("symmetric matrix rows must all have length n"));
        }
        SymMatrix::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }
}

impl From<SymMatrix> for Vec<Vec<f64>> {
    fn from(m: SymMatrix) -> Self {
        let n = m.dim();
        (0..n).map(|i| (0..n).map(|j| m.0[(i, j)]).collect()).collect()
    }
}

impl SymMatrix {
    /// Symmetrizes `m` by averaging it with its transpose.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::dims(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::dims("symmetric matrix must have dim >= 1"));
        }
        Ok(Self::symmetrized(m))
    }

    pub(crate) fn symmetrized(mut m: DMatrix<f64>) -> Self {
        let n = m.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        SymMatrix(m)
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix(DMatrix::zeros(dim, dim))
    }

    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        SymMatrix(DMatrix::identity(dim, dim) * scale)
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// `F Fᵀ` for a factor `F` with `dim` rows.
    pub fn from_factor(factor: &DMatrix<f64>) -> Self {
        Self::symmetrized(factor * factor.transpose())
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn diagonal(&self) -> DVector<f64> {
        self.0.diagonal()
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 - &other.0)
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix(&self.0 * s)
    }

    pub fn add_identity(&self, s: f64) -> SymMatrix {
        let mut m = self.0.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += s;
        }
        SymMatrix(m)
    }

    /// `M C Mᵀ` for a (possibly rectangular) `M`.
    pub fn congruence(&self, m: &DMatrix<f64>) -> SymMatrix {
        Self::symmetrized(m * &self.0 * m.transpose())
    }

    pub fn eigen(&self) -> SpectralDecomp {
        SpectralDecomp::of(self)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigen().eigenvalues[0]
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let e = self.eigen();
        e.eigenvalues[e.eigenvalues.len() - 1]
    }

    /// Largest absolute eigenvalue.
    pub fn spectral_norm(&self) -> f64 {
        let e = self.eigen();
        e.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    pub fn is_pd(&self) -> bool {
        let e = self.eigen();
        let max = e.eigenvalues[0];
        let min = e.eigenvalues[e.eigenvalues.len() - 1];
        min > PD_REL_TOL * max.max(1.0)
    }

    /// PSD up to `-tol` on the smallest eigenvalue.
    pub fn is_psd(&self, tol: f64) -> bool {
        self.min_eigenvalue() >= -tol
    }

    /// `self ⪯ other + slack·I`.
    pub fn loewner_le(&self, other: &SymMatrix, slack: f64) -> bool {
        other.sub(self).min_eigenvalue() >= -slack
    }

    pub fn cholesky(&self) -> Result<Cholesky> {
        Cholesky::factor(self)
    }

    /// Factor `F` with `F Fᵀ` equal to the positive part of `self`.
    pub fn psd_factor(&self) -> DMatrix<f64> {
        let e = self.eigen();
        let kept: Vec<usize> = (0..e.eigenvalues.len()).filter(|&i| e.eigenvalues[i] > 0.0).collect();
        let mut f = DMatrix::zeros(self.dim(), kept.len());
        for (c, &i) in kept.iter().enumerate() {
            let s = e.eigenvalues[i].sqrt();
            f.set_column(c, &(e.eigenvectors.column(i) * s));
        }
        f
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }
}

/// Eigendecomposition with eigenvalues sorted in non-increasing order.
#[derive(Debug, Clone)]
pub struct SpectralDecomp {
    pub eigenvalues: DVector<f64>,
    /// Orthonormal eigenvectors, one per column, in the same order.
    pub eigenvectors: DMatrix<f64>,
}

impl SpectralDecomp {
    pub fn of(m: &SymMatrix) -> Self {
        let eig = m.0.clone().symmetric_eigen();
        let (values, vectors) = jacobi_refine(&m.0, eig.eigenvectors);
        let n = m.dim();
        let mut vecs: Vec<DVector<f64>> = (0..n).map(|i| normalize_sign(vectors.column(i).into_owned())).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            let (va, vb) = (values[a], values[b]);
            vb.partial_cmp(&va)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| lexicographic_desc(&vecs[a], &vecs[b]))
        });
        let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| values[i]));
        let mut eigenvectors = DMatrix::zeros(n, n);
        for (c, &i) in order.iter().enumerate() {
            eigenvectors.set_column(c, &std::mem::replace(&mut vecs[i], DVector::zeros(0)));
        }
        SpectralDecomp {
            eigenvalues,
            eigenvectors,
        }
    }

    pub fn reconstruct(&self) -> SymMatrix {
        let d = DMatrix::from_diagonal(&self.eigenvalues);
        SymMatrix::symmetrized(&self.eigenvectors * d * self.eigenvectors.transpose())
    }
}

/// Polishes an approximate eigenbasis `v` of `a` with cyclic Jacobi sweeps
/// on `vᵀ a v`, which is already nearly diagonal.
fn jacobi_refine(a: &DMatrix<f64>, mut v: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut b = v.transpose() * a * &v;
    b = (&b + b.transpose()) * 0.5;
    let scale = b.diagonal().amax().max(f64::MIN_POSITIVE);
    for _ in 0..30 {
        let mut off = 0.0f64;
        for j in 0..n {
            for i in 0..j {
                off = off.max(b[(i, j)].abs());
            }
        }
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let bpq = b[(p, q)];
                if bpq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (b[(q, q)] - b[(p, p)]) / (2.0 * bpq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (bkp, bkq) = (b[(k, p)], b[(k, q)]);
                    b[(k, p)] = c * bkp - s * bkq;
                    b[(k, q)] = s * bkp + c * bkq;
                }
                for k in 0..n {
                    let (bpk, bqk) = (b[(p, k)], b[(q, k)]);
                    b[(p, k)] = c * bpk - s * bqk;
                    b[(q, k)] = s * bpk + c * bqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    (b.diagonal(), v)
}

/// Flips `v` so that its first entry of non-negligible magnitude is positive.
pub(crate) fn normalize_sign(mut v: DVector<f64>) -> DVector<f64> {
    let scale = v.amax();
    if let Some(x) = v.iter().find(|x| x.abs() > 1e-12 * scale) {
        if *x < 0.0 {
            v.neg_mut();
        }
    }
    v
}

fn lexicographic_desc(a: &DVector<f64>, b: &DVector<f64>) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match y.partial_cmp(x) {
            Some(std::cmp::Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    std::cmp::Ordering::Equal
}

fn check_square(h: &DMatrix<f64>, c: &SymMatrix) -> Result<()> {
    if h.ncols() != c.dim() {
        return Err(Error::dims(format!(
            "observation matrix has {} columns but covariance has dim {}",
            h.ncols(),
            c.dim()
        )));
    }
    Ok(())
}

/// `vᵀ C⁻¹ v` through a Cholesky solve.
pub fn mahalanobis_sq(v: &DVector<f64>, c: &SymMatrix) -> Result<f64> {
    if v.len() != c.dim() {
        return Err(Error::dims(format!(
            "vector length {} vs covariance dim {}",
            v.len(),
            c.dim()
        )));
    }
    let chol = c.cholesky()?;
    let w = chol.solve_lower(v);
    Ok(w.norm_squared())
}

/// `inf{λ : B ⪯ λA}` for PSD `B` and PD `A`, i.e. the largest generalized
/// eigenvalue of the pencil `(B, A)`.
pub fn loewner_ratio(b: &SymMatrix, a: &SymMatrix) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dims(format!(
            "loewner_ratio operands have dims {} and {}",
            b.dim(),
            a.dim()
        )));
    }
    let chol = a.cholesky()?;
    let whitened = chol.whiten(b);
    Ok(whitened.max_eigenvalue().max(0.0))
}

/// Kalman gain `G = C Hᵀ (I + H C Hᵀ)⁻¹`.
pub fn kalman_gain(c: &SymMatrix, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square(h, c)?;
    let q = h.nrows();
    let cht = c.as_matrix() * h.transpose();
    if q == 0 {
        return Ok(cht);
    }
    let innov = SymMatrix::symmetrized(h * &cht).add_identity(1.0);
    let chol = innov.cholesky()?;
    // G = (S⁻¹ (C Hᵀ)ᵀ)ᵀ with S symmetric.
    Ok(chol.solve_matrix(&cht.transpose()).transpose())
}

/// Kalman covariance update `𝒦(C) = C − C Hᵀ (I + H C Hᵀ)⁻¹ H C`.
pub fn kalman_update_operator(c: &SymMatrix, h: &DMatrix<f64>) -> Result<SymMatrix> {
    check_square(h, c)?;
    if h.nrows() == 0 {
        return Ok(c.clone());
    }
    let hc = h * c.as_matrix();
    let innov = SymMatrix::symmetrized(&hc * h.transpose()).add_identity(1.0);
    let chol = innov.cholesky()?;
    let w = chol.solve_lower_matrix(&hc);
    Ok(SymMatrix::symmetrized(c.as_matrix() - w.transpose() * w))
}

/// Result of [`top_p_projection`].
#[derive(Debug, Clone)]
pub struct TopProjection {
    /// Orthogonal projector onto the span of the top-p eigenvectors.
    pub projector: SymMatrix,
    /// Top-p eigenvalues in non-increasing order.
    pub eigenvalues: Vec<f64>,
    /// Matching unit eigenvectors, one per column (`dim × p`).
    pub eigenvectors: DMatrix<f64>,
    /// The (p+1)-th eigenvalue, 0 when `p == dim`.
    pub rho_next: f64,
}

/// Projection onto the eigenspace of the `p` largest eigenvalues of `c`.
pub fn top_p_projection(c: &SymMatrix, p: usize) -> Result<TopProjection> {
    let d = c.dim();
    if p == 0 || p > d {
        return Err(Error::dims(format!("projection rank p={p} must satisfy 1 <= p <= {d}")));
    }
    let (eigenvalues, eigenvectors, rho_next) = if d <= DENSE_EIGEN_MAX_DIM {
        let e = c.eigen();
        let vals: Vec<f64> = e.eigenvalues.iter().take(p).copied().collect();
        let vecs = e.eigenvectors.columns(0, p).into_owned();
        let next = if p < d { e.eigenvalues[p] } else { 0.0 };
        (vals, vecs, next)
    } else {
        let want = (p + 1).min(d);
        let m = c.as_matrix();
        let res = subspace::top_eigenpairs(d, want, |x| m * x, subspace::gershgorin_shift(m));
        let next = if p < d { res.values[p] } else { 0.0 };
        (res.values[..p].to_vec(), res.vectors.columns(0, p).into_owned(), next)
    };
    let projector = SymMatrix::symmetrized(&eigenvectors * eigenvectors.transpose());
    Ok(TopProjection {
        projector,
        eigenvalues,
        eigenvectors,
        rho_next,
    })
}

/// Restriction of `m` to the span of its positive-eigenvalue eigenvectors.
pub fn positive_part(m: &SymMatrix) -> SymMatrix {
    SymMatrix::from_factor(&m.psd_factor())
}

/// `λ_max / λ_min` of a PD matrix.
pub fn condition_number(c: &SymMatrix) -> Result<f64> {
    let e = c.eigen();
    let max = e.eigenvalues[0];
    let min = e.eigenvalues[e.eigenvalues.len() - 1];
    if min <= PD_REL_TOL * max.max(1.0) {
        return Err(Error::NotPositiveDefinite {
            index: e.eigenvalues.len() - 1,
            pivot: min,
        });
    }
    Ok(max / min)
}

/// Orthonormal basis of the column span of `m`, columns with `|R_jj|` below
/// the relative threshold are dropped.
pub fn orthonormal_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let scale = m.column_iter().fold(0.0_f64, |a, c| a.max(c.norm()));
    if scale == 0.0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    for col in m.column_iter() {
        let mut v = col.into_owned();
        // Two passes of modified Gram–Schmidt.
        for _ in 0..2 {
            for b in &basis {
                let dot = b.dot(&v);
                v.axpy(-dot, b, 1.0);
            }
        }
        let n = v.norm();
        if n > 1e-10 * scale {
            basis.push(v / n);
        }
    }
    let mut out = DMatrix::zeros(m.nrows(), basis.len());
    for (j, b) in basis.iter().enumerate() {
        out.set_column(j, b);
    }
    out
}
