//! Exact Kalman filter and the augmented reference Riccati recursion.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{kalman_gain, kalman_update_operator, Operator, SymMatrix};
use crate::models::{CoefficientStream, StepCoefficients, TurbulenceParams};
use crate::rng::standard_normal_vector;

/// Gaussian estimate `N(m, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: DVector<f64>,
    pub cov: SymMatrix,
}

/// `A C Aᵀ` for a structured `A`.
pub fn propagate(a: &Operator, c: &SymMatrix) -> SymMatrix {
    let ac = a.apply_mat(c.as_matrix());
    SymMatrix::symmetrized(a.apply_mat(&ac.transpose()))
}

pub fn kalman_step(state: &KalmanState, coeffs: &StepCoefficients, y: &DVector<f64>) -> Result<KalmanState> {
    let d = coeffs.state_dim();
    if state.mean.len() != d || state.cov.dim() != d {
        return Err(Error::dims(format!(
            "Kalman state has dims ({}, {}), coefficients have d={d}",
            state.mean.len(),
            state.cov.dim()
        )));
    }
    if y.len() != coeffs.obs_dim() {
        return Err(Error::dims(format!(
            "observation has length {}, expected {}",
            y.len(),
            coeffs.obs_dim()
        )));
    }
    let mean_f = coeffs.a.apply(&state.mean) + &coeffs.b;
    let cov_f = propagate(&coeffs.a, &state.cov).add(&coeffs.sigma_sym());
    let h = coeffs.h.to_dense();
    let g = kalman_gain(&cov_f, &h)?;
    let mean = &mean_f + g * (y - &h * &mean_f);
    let cov = kalman_update_operator(&cov_f, &h)?;
    Ok(KalmanState { mean, cov })
}

/// Filter parameters `(r, τ, ρ)` shared by the ensemble filter and its
/// reference recursion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentedParams {
    pub r: f64,
    pub tau: f64,
    pub rho: f64,
}

impl AugmentedParams {
    pub fn new(r: f64, tau: f64, rho: f64) -> Result<Self> {
        let p = AugmentedParams { r, tau, rho };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r >= 1.0) {
            return Err(Error::InvalidParams(format!("r must be >= 1, got {}", self.r)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidParams(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.rho > 0.0) {
            return Err(Error::InvalidParams(format!("rho must be > 0, got {}", self.rho)));
        }
        Ok(())
    }

    /// `τρ`.
    pub fn additive_level(&self) -> f64 {
        self.tau * self.rho
    }

    pub fn of_turbulence(p: &TurbulenceParams) -> Self {
        AugmentedParams {
            r: p.r,
            tau: p.tau,
            rho: p.rho,
        }
    }
}

/// The instability covariance `Σ⁺`, positive part of `ρAAᵀ + Σ − (ρτ/r)I`,
/// stored as block factors so that sampling stays cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct InstabilityCovariance {
    dim: usize,
    /// `(offset, F)` with `F Fᵀ` the block of `Σ⁺` starting at `offset`.
    pieces: Vec<(usize, DMatrix<f64>)>,
}

impl InstabilityCovariance {
    pub fn zero(dim: usize) -> Self {
        InstabilityCovariance {
            dim,
            pieces: Vec::new(),
        }
    }

    /// `Σ⁺ = F Fᵀ` for an arbitrary `d × m` factor.
    pub fn from_factor(f: DMatrix<f64>) -> Self {
        InstabilityCovariance {
            dim: f.nrows(),
            pieces: vec![(0, f)],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.pieces.iter().map(|(_, f)| f.ncols()).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.rank() == 0
    }

    /// `d × rank` factor `F` with `F Fᵀ = Σ⁺`.
    pub fn factor(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, self.rank());
        let mut col = 0;
        for (off, f) in &self.pieces {
            out.view_mut((*off, col), (f.nrows(), f.ncols())).copy_from(f);
            col += f.ncols();
        }
        out
    }

    pub fn to_sym(&self) -> SymMatrix {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (off, f) in &self.pieces {
            let k = f.nrows();
            m.view_mut((*off, *off), (k, k)).copy_from(&(f * f.transpose()));
        }
        SymMatrix::symmetrized(m)
    }

    /// State components touched by `Σ⁺`.
    pub fn support(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (off, f) in &self.pieces {
            if f.ncols() > 0 {
                out.extend(*off..*off + f.nrows());
            }
        }
        out
    }

    /// One draw of `N(0, Σ⁺)`.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let z = standard_normal_vector(rng, self.rank());
        let mut out = DVector::zeros(self.dim);
        let mut col = 0;
        for (off, f) in &self.pieces {
            let m = f.ncols();
            if m > 0 {
                let seg = f * z.rows(col, m);
                out.rows_mut(*off, f.nrows()).copy_from(&seg);
                col += m;
            }
        }
        out
    }
}

type BlockPair = (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>);

/// Common block layout of `A` and `Σ`, if both are block diagonal.
fn shared_layout(a: &Operator, sigma: &Operator) -> Option<BlockPair> {
    for layout in [a.block_sizes()?, sigma.block_sizes()?] {
        if let (Some(ab), Some(sb)) = (a.as_blocks(&layout), sigma.as_blocks(&layout)) {
            return Some((ab, sb));
        }
    }
    None
}

pub fn instability_covariance(coeffs: &StepCoefficients, params: &AugmentedParams) -> InstabilityCovariance {
    let d = coeffs.state_dim();
    let shift = params.rho * params.tau / params.r;
    let positive_factor = |a: &DMatrix<f64>, s: &DMatrix<f64>| -> DMatrix<f64> {
        let m = SymMatrix::symmetrized(a * a.transpose() * params.rho + s).add_identity(-shift);
        if m.dim() == 1 {
            let v = m.get(0, 0);
            return if v > 0.0 {
                DMatrix::from_element(1, 1, v.sqrt())
            } else {
                DMatrix::zeros(1, 0)
            };
        }
        m.psd_factor()
    };
    let pieces = match shared_layout(&coeffs.a, &coeffs.sigma) {
        Some((ab, sb)) => {
            let mut off = 0;
            ab.iter()
                .zip(&sb)
                .map(|(a, s)| {
                    let piece = (off, positive_factor(a, s));
                    off += a.nrows();
                    piece
                })
                .collect()
        }
        None => vec![(0, positive_factor(&coeffs.a.to_dense(), &coeffs.sigma.to_dense()))],
    };
    InstabilityCovariance { dim: d, pieces }
}

/// `Σ′ = r²Σ⁺ + r²τρ I`.
pub fn augmented_noise(coeffs: &StepCoefficients, params: &AugmentedParams) -> SymMatrix {
    let r2 = params.r * params.r;
    instability_covariance(coeffs, params)
        .to_sym()
        .scale(r2)
        .add_identity(r2 * params.additive_level())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedRiccatiState {
    pub cov: SymMatrix,
    pub params: AugmentedParams,
}

/// `R̂′ = r² A R′ Aᵀ + Σ′`, `R′⁺ = 𝒦(R̂′)`.
pub fn augmented_riccati_step(
    state: &AugmentedRiccatiState,
    coeffs: &StepCoefficients,
) -> Result<AugmentedRiccatiState> {
    let d = coeffs.state_dim();
    if state.cov.dim() != d {
        return Err(Error::dims(format!(
            "Riccati state has dim {}, coefficients have d={d}",
            state.cov.dim()
        )));
    }
    let p = &state.params;
    let forecast = propagate(&coeffs.a, &state.cov)
        .scale(p.r * p.r)
        .add(&augmented_noise(coeffs, p));
    let cov = kalman_update_operator(&forecast, &coeffs.h.to_dense())?;
    Ok(AugmentedRiccatiState { cov, params: *p })
}

/// Unfiltered equilibrium covariance of the augmented system, driven by
/// `r²(Σ + τρI)`.
#[derive(Debug, Clone)]
pub struct UnfilteredCovariance {
    pub cov: SymMatrix,
    /// Components in the instability subspace whose recursion diverges;
    /// their rows and columns are left at zero.
    pub excluded: Vec<usize>,
    pub closed_form: bool,
}

/// `V′_{n+1} = r² A V′_n Aᵀ + r²(Σ + τρI)`: closed form when the dynamics
/// are time homogeneous scaled rotations with block-constant noise,
/// otherwise `n_steps` iterations from zero.
pub fn unfiltered_covariance(
    stream: &dyn CoefficientStream,
    params: &AugmentedParams,
    n_steps: usize,
) -> Result<UnfilteredCovariance> {
    params.validate()?;
    let d = stream.state_dim();
    let r2 = params.r * params.r;
    let c0 = stream.coefficients(0);
    if stream.is_time_homogeneous() {
        if let Some(blocks) = rotation_blocks(&c0) {
            let mut diag = vec![0.0; d];
            let mut excluded = Vec::new();
            let mut off = 0;
            for (gain, noise, k) in blocks {
                let factor = r2 * gain;
                if factor < 1.0 {
                    let v = r2 * (noise + params.additive_level()) / (1.0 - factor);
                    diag[off..off + k].iter_mut().for_each(|x| *x = v);
                } else if params.rho * gain + noise - params.rho * params.tau / params.r > 0.0 {
                    excluded.extend(off..off + k);
                } else {
                    return Err(Error::DivergentMode { k: off, factor });
                }
                off += k;
            }
            return Ok(UnfilteredCovariance {
                cov: SymMatrix::from_diagonal(&diag),
                excluded,
                closed_form: true,
            });
        }
    }
    let mut v = SymMatrix::zeros(d);
    for n in 0..n_steps {
        let c = if n == 0 { c0.clone() } else { stream.coefficients(n) };
        let noise = c.sigma_sym().add_identity(params.additive_level()).scale(r2);
        let next = propagate(&c.a, &v).scale(r2).add(&noise);
        if next.as_matrix().iter().any(|x| !x.is_finite()) {
            let diag = v.diagonal();
            let k = diag.imax();
            return Err(Error::DivergentMode {
                k,
                factor: f64::INFINITY,
            });
        }
        v = next;
    }
    Ok(UnfilteredCovariance {
        cov: v,
        excluded: Vec::new(),
        closed_form: false,
    })
}

/// Per block `(c, s, size)` when every dynamics block satisfies
/// `B Bᵀ = Bᵀ B = c I` and the noise is `s I` on it.
fn rotation_blocks(c: &StepCoefficients) -> Option<Vec<(f64, f64, usize)>> {
    let (ab, sb) = shared_layout(&c.a, &c.sigma)?;
    let mut out = Vec::with_capacity(ab.len());
    for (a, s) in ab.iter().zip(&sb) {
        let k = a.nrows();
        let g = a * a.transpose();
        let gt = a.transpose() * a;
        let gain = g[(0, 0)];
        let noise = s[(0, 0)];
        let tol = 1e-14 * gain.abs().max(1.0);
        let id = DMatrix::identity(k, k);
        if (&g - &id * gain).amax() > tol || (&gt - &id * gain).amax() > tol {
            return None;
        }
        if (s - &id * noise).amax() > 1e-14 * noise.abs().max(1e-300) {
            return None;
        }
        out.push((gain, noise, k));
    }
    Some(out)
}

/// Additive noise used in the per-mode stationary Riccati equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiccatiNoise {
    /// `r̂ = r² r e^{−2γh} + r²[Σ]_kk + τρ`, the closed-form mode criterion.
    Direct,
    /// `r̂ = r² r e^{−2γh} + r²[Σ⁺]_kk + r²τρ`, the exact fixed point of
    /// [`augmented_riccati_step`].
    Instability,
}

pub const RICCATI_TOL: f64 = 1e-12;
pub const RICCATI_MAX_ITER: usize = 100_000;

fn require_homogeneous(params: &TurbulenceParams) -> Result<()> {
    if params.jump_spec.is_some() {
        return Err(Error::InvalidParams(
            "closed-form mode analysis requires a time-homogeneous model (no jump_spec)".into(),
        ));
    }
    params.validate()
}

/// Stationary `r_k` for wavenumber `k`, by Picard iteration from 0.
pub fn stationary_riccati_mode(params: &TurbulenceParams, k: usize, noise: RiccatiNoise) -> Result<f64> {
    let sigma_obs = params
        .sigma_obs
        .ok_or_else(|| Error::InvalidParams("sigma_obs must be set for the observed Riccati solve".into()))?;
    let n_obs = params.dim() as f64;
    let e = params.decay_sq(k);
    let r2 = params.r * params.r;
    let tr = params.tau * params.rho;
    let constant = match noise {
        RiccatiNoise::Direct => r2 * params.sigma_kk(k) + tr,
        RiccatiNoise::Instability => {
            let plus = (params.rho * e + params.sigma_kk(k) - tr / params.r).max(0.0);
            r2 * plus + r2 * tr
        }
    };
    let map = |x: f64| {
        let hat = r2 * x * e + constant;
        sigma_obs * hat / (sigma_obs + n_obs * hat)
    };
    let mut x = 0.0;
    let mut damping = 1.0;
    let mut last_step = 0.0;
    for _ in 0..RICCATI_MAX_ITER {
        let step = map(x) - x;
        if step * last_step < 0.0 {
            damping = 0.5;
        }
        x += damping * step;
        if step.abs() < RICCATI_TOL {
            return Ok(x);
        }
        last_step = step;
    }
    Err(Error::NoConvergence {
        k,
        iterations: RICCATI_MAX_ITER,
    })
}

/// Stationary per-mode `r_k`, `k = 0..=J`, with the closed-form noise.
pub fn stationary_riccati_diag(params: &TurbulenceParams) -> Result<Vec<f64>> {
    stationary_riccati_diag_with(params, RiccatiNoise::Direct)
}

pub fn stationary_riccati_diag_with(params: &TurbulenceParams, noise: RiccatiNoise) -> Result<Vec<f64>> {
    require_homogeneous(params)?;
    (0..=params.j)
        .map(|k| stationary_riccati_mode(params, k, noise))
        .collect()
}

/// Expands per-mode values to the state layout.
pub fn mode_values_to_state(params: &TurbulenceParams, per_mode: &[f64]) -> Vec<f64> {
    (0..params.dim())
        .map(|i| per_mode[TurbulenceParams::wavenumber(i)])
        .collect()
}

/// The stationary reference covariance `R̃` of a time-homogeneous observed
/// turbulence model, a fixed point of [`augmented_riccati_step`].
pub fn stationary_reference(params: &TurbulenceParams) -> Result<SymMatrix> {
    let per_mode = stationary_riccati_diag_with(params, RiccatiNoise::Instability)?;
    Ok(SymMatrix::from_diagonal(&mode_values_to_state(params, &per_mode)))
}

/// `R̃_n` along a stream: either a constant stationary solution or the
/// iterates of the augmented recursion from a chosen start.
#[derive(Debug, Clone)]
pub enum ReferenceCovariance {
    Stationary(SymMatrix),
    /// `covs[n]` is `R̃_n`; `burn_in` steps are treated as transient.
    Iterated {
        covs: Vec<SymMatrix>,
        burn_in: usize,
    },
}

impl ReferenceCovariance {
    pub fn at(&self, n: usize) -> &SymMatrix {
        match self {
            ReferenceCovariance::Stationary(r) => r,
            ReferenceCovariance::Iterated { covs, .. } => &covs[n.min(covs.len() - 1)],
        }
    }

    pub fn burn_in(&self) -> usize {
        match self {
            ReferenceCovariance::Stationary(_) => 0,
            ReferenceCovariance::Iterated { burn_in, .. } => *burn_in,
        }
    }
}

/// Iterates the augmented recursion from `r0` for `steps` steps, keeping
/// `R̃_0 = r0, …, R̃_steps`.
pub fn reference_sequence(
    stream: &dyn CoefficientStream,
    params: &AugmentedParams,
    r0: SymMatrix,
    steps: usize,
    burn_in: usize,
) -> Result<ReferenceCovariance> {
    params.validate()?;
    let mut covs = Vec::with_capacity(steps + 1);
    let mut state = AugmentedRiccatiState {
        cov: r0,
        params: *params,
    };
    covs.push(state.cov.clone());
    for n in 0..steps {
        state = augmented_riccati_step(&state, &stream.coefficients(n))?;
        covs.push(state.cov.clone());
    }
    Ok(ReferenceCovariance::Iterated { covs, burn_in })
}

/// Iterates a time-homogeneous recursion until successive iterates differ by
/// less than `tol` in max norm, returning the limit and the step count.
pub fn riccati_fixed_point(
    coeffs: &StepCoefficients,
    params: &AugmentedParams,
    r0: SymMatrix,
    tol: f64,
    max_steps: usize,
) -> Result<(SymMatrix, usize)> {
    let mut state = AugmentedRiccatiState {
        cov: r0,
        params: *params,
    };
    for n in 1..=max_steps {
        let next = augmented_riccati_step(&state, coeffs)?;
        let diff = (next.cov.as_matrix() - state.cov.as_matrix()).amax();
        state = next;
        if diff < tol {
            return Ok((state.cov, n));
        }
    }
    Err(Error::NoConvergence {
        k: 0,
        iterations: max_steps,
    })
}

/// Observability Gramian `𝒪_m = Σ_{k=1}^m A_{k,1}ᵀ H_kᵀ H_k A_{k,1}` with
/// `A_{k,1} = r^{k−1} A_{k−1}⋯A_1`; returns it with its smallest eigenvalue.
pub fn observability_gramian(stream: &dyn CoefficientStream, m: usize, r: f64) -> Result<(SymMatrix, f64)> {
    if m == 0 {
        return Err(Error::InvalidParams("observability window m must be >= 1".into()));
    }
    let d = stream.state_dim();
    let mut prod = DMatrix::<f64>::identity(d, d);
    let mut gram = DMatrix::<f64>::zeros(d, d);
    for k in 1..=m {
        if k > 1 {
            prod = stream.coefficients(k - 1).a.apply_mat(&prod) * r;
        }
        let ha = stream.coefficients(k).h.apply_mat(&prod);
        gram += ha.transpose() * ha;
    }
    let g = SymMatrix::symmetrized(gram);
    let c = g.min_eigenvalue();
    Ok((g, c))
}
