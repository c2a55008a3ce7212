//! Effective-dimension checks for the low-dimensionality assumption.
//!
//! Counts follow two conventions. Wavenumber counts (`p_*`) count failing
//! wavenumbers `k ≥ 1`; mode 0 is reported separately in `mode0_fails`.
//! Eigenvalue counts (`eigen_*`) count state directions, i.e. `2` per failing
//! wavenumber plus one for a failing mode 0. The `±k` count `p_effective_pm`
//! is `2·p_effective`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman_ref::{
    augmented_riccati_step, instability_covariance, stationary_riccati_diag, AugmentedParams, AugmentedRiccatiState,
};
use crate::linalg::SymMatrix;
use crate::models::{CoefficientStream, TurbulenceParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub k: usize,
    pub gamma_k: f64,
    pub sigma_kk: f64,
    /// Covariance branch: the bound on the reference covariance entry.
    pub branch1: f64,
    /// Instability branch.
    pub branch2: f64,
    /// Stationary Riccati solution, `NaN` for the unfiltered check.
    pub r_k: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimCheck {
    Unfiltered,
    Observed,
    General,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimReport {
    pub check: DimCheck,
    pub rho: f64,
    pub r: f64,
    pub tau: f64,
    pub p_instability: usize,
    pub p_covariance: usize,
    pub p_effective: usize,
    pub p_effective_pm: usize,
    /// `None` when there is no wavenumber structure.
    pub mode0_fails: Option<bool>,
    /// Failing wavenumbers (either branch), including 0 if it fails.
    pub failing_modes: Vec<usize>,
    pub eigen_instability: usize,
    pub eigen_covariance: usize,
    pub eigen_effective: usize,
    pub modes: Vec<ModeRow>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub burn_in: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub window: Option<usize>,
}

fn require_homogeneous(params: &TurbulenceParams) -> Result<()> {
    params.validate()?;
    if params.jump_spec.is_some() {
        return Err(Error::InvalidParams(
            "closed-form verification requires a time-homogeneous model (no jump_spec)".into(),
        ));
    }
    Ok(())
}

/// Per-mode rows with the failure flags of each branch.
struct Branches {
    rows: Vec<ModeRow>,
    cov_fail: Vec<bool>,
    inst_fail: Vec<bool>,
}

fn summarize(check: DimCheck, params: &TurbulenceParams, b: Branches) -> DimReport {
    let positive = |flags: &[bool]| flags.iter().skip(1).filter(|&&f| f).count();
    let p_instability = positive(&b.inst_fail);
    let p_covariance = positive(&b.cov_fail);
    let p_effective = p_instability.max(p_covariance);
    let eigen = |flags: &[bool]| usize::from(flags[0]) + 2 * positive(flags);
    let eigen_instability = eigen(&b.inst_fail);
    let eigen_covariance = eigen(&b.cov_fail);
    let failing_modes: Vec<usize> = b.rows.iter().filter(|m| !m.pass).map(|m| m.k).collect();
    DimReport {
        check,
        rho: params.rho,
        r: params.r,
        tau: params.tau,
        p_instability,
        p_covariance,
        p_effective,
        p_effective_pm: 2 * p_effective,
        mode0_fails: Some(!b.rows[0].pass),
        failing_modes,
        eigen_instability,
        eigen_covariance,
        eigen_effective: eigen_instability.max(eigen_covariance),
        modes: b.rows,
        burn_in: None,
        window: None,
    }
}

/// Unfiltered criterion: mode `k` passes when
/// `ρ ≥ max{ r²Σ_kk / (1 − r²τ − r²e^{−2γ_k h}), (rρ/τ) e^{−2γ_k h} + (r/2) Σ_kk }`.
pub fn verify_dim_unfiltered(params: &TurbulenceParams) -> Result<DimReport> {
    require_homogeneous(params)?;
    let (r, tau, rho) = (params.r, params.tau, params.rho);
    let r2 = r * r;
    let mut b = Branches {
        rows: Vec::with_capacity(params.j + 1),
        cov_fail: Vec::new(),
        inst_fail: Vec::new(),
    };
    for k in 0..=params.j {
        let e = params.decay_sq(k);
        let s = params.sigma_kk(k);
        let den = 1.0 - r2 * tau - r2 * e;
        let (branch1, fail1) = if den > 0.0 {
            let v = r2 * s / den;
            (v, v > rho)
        } else if s > 0.0 {
            (f64::INFINITY, true)
        } else {
            (0.0, false)
        };
        let branch2 = r * rho / tau * e + 0.5 * r * s;
        let fail2 = branch2 > rho;
        b.cov_fail.push(fail1);
        b.inst_fail.push(fail2);
        b.rows.push(ModeRow {
            k,
            gamma_k: params.gamma(k),
            sigma_kk: s,
            branch1,
            branch2,
            r_k: f64::NAN,
            pass: !(fail1 || fail2),
        });
    }
    Ok(summarize(DimCheck::Unfiltered, params, b))
}

/// Observed criterion: mode `k` passes when
/// `ρ ≥ max{ r_k, (rρ/τ) e^{−2γ_k h} + (r/2τ) E_k (1 − e^{−2γ_k h}) }`
/// with `r_k` the stationary Riccati solution.
pub fn verify_dim_observed(params: &TurbulenceParams) -> Result<DimReport> {
    require_homogeneous(params)?;
    if params.sigma_obs.is_none() {
        return Err(Error::InvalidParams(
            "sigma_obs must be set for the observed check".into(),
        ));
    }
    let (r, tau, rho) = (params.r, params.tau, params.rho);
    let rk = stationary_riccati_diag(params)?;
    let mut b = Branches {
        rows: Vec::with_capacity(params.j + 1),
        cov_fail: Vec::new(),
        inst_fail: Vec::new(),
    };
    for (k, &r_k) in rk.iter().enumerate() {
        let e = params.decay_sq(k);
        let branch2 = r * rho / tau * e + r / (2.0 * tau) * params.energy(k) * (1.0 - e);
        let (fail1, fail2) = (r_k > rho, branch2 > rho);
        b.cov_fail.push(fail1);
        b.inst_fail.push(fail2);
        b.rows.push(ModeRow {
            k,
            gamma_k: params.gamma(k),
            sigma_kk: params.sigma_kk(k),
            branch1: r_k,
            branch2,
            r_k,
            pass: !(fail1 || fail2),
        });
    }
    Ok(summarize(DimCheck::Observed, params, b))
}

/// The observed check when `sigma_obs` is set, otherwise the unfiltered one.
pub fn verify_dim(params: &TurbulenceParams) -> Result<DimReport> {
    if params.sigma_obs.is_some() {
        verify_dim_observed(params)
    } else {
        verify_dim_unfiltered(params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoRow {
    pub rho: f64,
    pub p: usize,
    pub p_pm: usize,
    pub p_instability: usize,
    pub p_covariance: usize,
}

/// Tabulates [`verify_dim`] over thresholds.
pub fn minimal_p_search(params: &TurbulenceParams, rho_grid: &[f64]) -> Result<Vec<RhoRow>> {
    if rho_grid.is_empty() {
        return Err(Error::InvalidParams("rho_grid must be nonempty".into()));
    }
    rho_grid
        .iter()
        .map(|&rho| {
            if !(rho > 0.0) {
                return Err(Error::InvalidParams(format!("rho_grid entries must be > 0, got {rho}")));
            }
            let rep = verify_dim(&TurbulenceParams { rho, ..params.clone() })?;
            Ok(RhoRow {
                rho,
                p: rep.p_effective,
                p_pm: rep.p_effective_pm,
                p_instability: rep.p_instability,
                p_covariance: rep.p_covariance,
            })
        })
        .collect()
}

/// Runs the augmented recursion from `I` for `burn_in` steps, then reports
/// the largest eigenvalue count above `ρ` and the largest `rank Σ⁺` seen over
/// the next `window` steps.
pub fn verify_dim_general(
    stream: &dyn CoefficientStream,
    params: &AugmentedParams,
    burn_in: usize,
    window: usize,
) -> Result<DimReport> {
    params.validate()?;
    if window == 0 {
        return Err(Error::InvalidParams("window must be >= 1".into()));
    }
    let d = stream.state_dim();
    let mut state = AugmentedRiccatiState {
        cov: SymMatrix::identity(d),
        params: *params,
    };
    let mut max_rank = 0;
    let mut max_count = 0;
    for n in 0..burn_in + window {
        let c = stream.coefficients(n);
        if n >= burn_in {
            max_rank = max_rank.max(instability_covariance(&c, params).rank());
        }
        state = augmented_riccati_step(&state, &c)?;
        if n >= burn_in {
            let count = state
                .cov
                .eigen()
                .eigenvalues
                .iter()
                .filter(|&&v| v > params.rho)
                .count();
            max_count = max_count.max(count);
        }
    }
    let p = max_rank.max(max_count);
    Ok(DimReport {
        check: DimCheck::General,
        rho: params.rho,
        r: params.r,
        tau: params.tau,
        p_instability: max_rank,
        p_covariance: max_count,
        p_effective: p,
        p_effective_pm: p,
        mode0_fails: None,
        failing_modes: Vec::new(),
        eigen_instability: max_rank,
        eigen_covariance: max_count,
        eigen_effective: p,
        modes: Vec::new(),
        burn_in: Some(burn_in),
        window: Some(window),
    })
}
