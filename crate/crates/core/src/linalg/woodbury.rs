//! Kalman gain for a low-rank-plus-isotropic forecast covariance.
//!
//! With `Ĉ = Ŝ Ŝᵀ / (K−1)` and `Ĉ^{τρ} = Ĉ + τρ I`, the innovation matrix
//! `I + H Ĉ^{τρ} Hᵀ` is `(I + τρ H Hᵀ) + V Vᵀ` with `V = H Ŝ / √(K−1)`. The
//! Woodbury identity reduces its inverse to a `K × K` solve, so nothing of
//! size `d × d` is ever formed.

use nalgebra::{DMatrix, DVector};

use super::operator::ObsSolver;
use super::{Cholesky, Operator, SymMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KalmanGainContext {
    /// `Ŝ / √(K−1)`, so that `Ĉ = U Uᵀ`.
    u: DMatrix<f64>,
    additive_level: f64,
    obs: Operator,
    solve: InnovationSolve,
}

/// Factorization of `I + H Ĉ^{τρ} Hᵀ`, in ensemble space when `K ≤ q` and
/// directly in observation space otherwise.
#[derive(Debug, Clone)]
enum InnovationSolve {
    Woodbury {
        obs_solver: ObsSolver,
        /// `(I + τρ H Hᵀ)⁻¹ V`.
        qv: DMatrix<f64>,
        inner: Cholesky,
    },
    Direct(Cholesky),
}

impl KalmanGainContext {
    /// `spread` is the `d × K` forecast spread `Ŝ`; `additive_level` is `τρ`.
    pub fn new(spread: &DMatrix<f64>, additive_level: f64, obs: &Operator) -> Result<Self> {
        let k = spread.ncols();
        if k < 2 {
            return Err(Error::InvalidParams(format!("ensemble size K={k} must be >= 2")));
        }
        if !(additive_level > 0.0) {
            return Err(Error::InvalidParams(format!(
                "additive inflation level {additive_level} must be > 0"
            )));
        }
        obs.check_compose(spread.nrows(), "observation operator")?;
        let u = spread / ((k - 1) as f64).sqrt();
        let v = obs.apply_mat(&u);
        let q = obs.nrows();
        let solve = if q < k {
            let hht = obs.apply_mat(&obs.transpose().to_dense());
            let m = SymMatrix::symmetrized(hht * additive_level + &v * v.transpose()).add_identity(1.0);
            InnovationSolve::Direct(m.cholesky().map_err(|_| Error::SingularInnerSolve)?)
        } else {
            let obs_solver = obs.observation_solver(additive_level)?;
            let qv = obs_solver.solve_mat(&v);
            let inner = SymMatrix::symmetrized(v.transpose() * &qv).add_identity(1.0);
            let inner = inner.cholesky().map_err(|_| Error::SingularInnerSolve)?;
            InnovationSolve::Woodbury { obs_solver, qv, inner }
        };
        Ok(KalmanGainContext {
            u,
            additive_level,
            obs: obs.clone(),
            solve,
        })
    }

    pub fn dim(&self) -> usize {
        self.u.nrows()
    }

    pub fn ensemble_size(&self) -> usize {
        self.u.ncols()
    }

    pub fn additive_level(&self) -> f64 {
        self.additive_level
    }

    pub fn obs(&self) -> &Operator {
        &self.obs
    }

    /// `U = Ŝ / √(K−1)`.
    pub fn scaled_spread(&self) -> &DMatrix<f64> {
        &self.u
    }

    /// `(I + H Ĉ^{τρ} Hᵀ)⁻¹ y`.
    pub fn innovation_solve(&self, y: &DVector<f64>) -> DVector<f64> {
        match &self.solve {
            InnovationSolve::Woodbury { obs_solver, qv, inner } => {
                let qy = obs_solver.solve(y);
                let t = inner.solve(&qv.tr_mul(y));
                qy - qv * t
            }
            InnovationSolve::Direct(c) => {
                if y.is_empty() {
                    return y.clone();
                }
                c.solve(y)
            }
        }
    }

    /// `Ĉ^{τρ} x`.
    pub fn cov_apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.u * self.u.tr_mul(x) + x * self.additive_level
    }

    /// `G y` with `G = Ĉ^{τρ} Hᵀ (I + H Ĉ^{τρ} Hᵀ)⁻¹`.
    pub fn gain_apply(&self, y: &DVector<f64>) -> DVector<f64> {
        let z = self.innovation_solve(y);
        self.cov_apply(&self.obs.apply_t(&z))
    }

    /// `𝒦(Ĉ^{τρ}) x`.
    pub fn posterior_apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let cx = self.cov_apply(x);
        let z = self.innovation_solve(&self.obs.apply(&cx));
        cx - self.cov_apply(&self.obs.apply_t(&z))
    }

    pub fn posterior_apply_mat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for (j, col) in x.column_iter().enumerate() {
            out.set_column(j, &self.posterior_apply(&col.into_owned()));
        }
        out
    }
}

/// `G y` through the Woodbury identity.
pub fn gain_apply_woodbury(ctx: &KalmanGainContext, y: &DVector<f64>) -> Result<DVector<f64>> {
    if y.len() != ctx.obs.nrows() {
        return Err(Error::dims(format!(
            "innovation has length {}, observation operator has {} rows",
            y.len(),
            ctx.obs.nrows()
        )));
    }
    Ok(ctx.gain_apply(y))
}
