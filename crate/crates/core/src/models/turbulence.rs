//! Galerkin-truncated linear stochastic turbulence on the 1D torus.
//!
//! State layout: `[mode 0, cos₁, sin₁, cos₂, sin₂, …, cos_J, sin_J]`, so
//! `d = 2J + 1`. Each wavenumber `k ≥ 1` owns a 2×2 block of `A`, a damped
//! rotation, and mode 0 is a scalar.

use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::markov::{markov_jump_step, JumpSpec};
use super::{CoefficientStream, StepCoefficients};
use crate::error::{Error, Result};
use crate::linalg::Operator;
use crate::rng::{substream, Domain};

/// Rotation rates `ω_k`, `k = 1..J`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OmegaSpec {
    #[default]
    Zero,
    /// `ω_k = c·k`.
    Linear(f64),
    /// Explicit `[ω_1, …, ω_J]`.
    PerMode(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurbulenceParams {
    /// Truncation wavenumber `J`.
    pub j: usize,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::gamma0")]
    pub gamma0: f64,
    #[serde(default = "defaults::nu_visc")]
    pub nu_visc: f64,
    #[serde(default = "defaults::e0")]
    pub e0: f64,
    #[serde(default = "defaults::h")]
    pub h: f64,
    #[serde(default)]
    pub omega: OmegaSpec,
    /// Constant forcing per state component (length `2J+1`); empty means zero.
    #[serde(default)]
    pub forcing: Vec<f64>,
    #[serde(default = "defaults::r")]
    pub r: f64,
    #[serde(default = "defaults::tau")]
    pub tau: f64,
    #[serde(default = "defaults::rho")]
    pub rho: f64,
    /// Observation noise variance `σᵒ` at each grid point; `None` leaves the
    /// system unobserved.
    #[serde(default)]
    pub sigma_obs: Option<f64>,
    #[serde(default)]
    pub jump_spec: Option<JumpSpec>,
}

mod defaults {
    pub fn alpha() -> f64 {
        2.0
    }
    pub fn beta() -> f64 {
        5.0 / 3.0
    }
    pub fn gamma0() -> f64 {
        0.01
    }
    pub fn nu_visc() -> f64 {
        0.01
    }
    pub fn e0() -> f64 {
        1.0
    }
    pub fn h() -> f64 {
        0.5
    }
    pub fn r() -> f64 {
        1.1
    }
    pub fn tau() -> f64 {
        1.0
    }
    pub fn rho() -> f64 {
        0.04
    }
}

impl TurbulenceParams {
    /// Kolmogorov spectrum parameters with `J = 50`, unobserved.
    pub fn kolmogorov() -> Self {
        TurbulenceParams {
            j: 50,
            alpha: 2.0,
            beta: 5.0 / 3.0,
            gamma0: 0.01,
            nu_visc: 0.01,
            e0: 1.0,
            h: 0.5,
            omega: OmegaSpec::Zero,
            forcing: Vec::new(),
            r: 1.1,
            tau: 0.6,
            rho: 0.04,
            sigma_obs: None,
            jump_spec: None,
        }
    }

    /// [`kolmogorov`](Self::kolmogorov) observed on the regular grid with `σᵒ = 10`.
    pub fn kolmogorov_observed() -> Self {
        TurbulenceParams {
            sigma_obs: Some(10.0),
            ..Self::kolmogorov()
        }
    }

    pub fn dim(&self) -> usize {
        2 * self.j + 1
    }

    pub fn gamma(&self, k: usize) -> f64 {
        self.gamma0 + self.nu_visc * (k as f64).powf(self.alpha)
    }

    /// `E_k = E₀ k^{−β}`, with `E₀` at `k = 0`.
    pub fn energy(&self, k: usize) -> f64 {
        if k == 0 {
            self.e0
        } else {
            self.e0 * (k as f64).powf(-self.beta)
        }
    }

    /// `e^{−2γ_k h}`.
    pub fn decay_sq(&self, k: usize) -> f64 {
        (-2.0 * self.gamma(k) * self.h).exp()
    }

    /// `[Σ]_kk = ½ E_k (1 − e^{−2γ_k h})`.
    pub fn sigma_kk(&self, k: usize) -> f64 {
        0.5 * self.energy(k) * (1.0 - self.decay_sq(k))
    }

    pub fn omega_k(&self, k: usize) -> f64 {
        match &self.omega {
            OmegaSpec::Zero => 0.0,
            OmegaSpec::Linear(c) => c * k as f64,
            OmegaSpec::PerMode(w) => w.get(k.wrapping_sub(1)).copied().unwrap_or(0.0),
        }
    }

    /// Observation scale `√((2J+1)/σᵒ)`.
    pub fn obs_scale(&self) -> Option<f64> {
        self.sigma_obs.map(|s| (self.dim() as f64 / s).sqrt())
    }

    /// State index of mode `k`'s first component.
    pub fn mode_index(k: usize) -> usize {
        if k == 0 {
            0
        } else {
            2 * k - 1
        }
    }

    /// Wavenumber of state component `i`.
    pub fn wavenumber(i: usize) -> usize {
        i.div_ceil(2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.j < 1 {
            return bad("j must be >= 1".into());
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.h > 0.0) {
            return bad(format!("h must be > 0, got {}", self.h));
        }
        if !(self.e0 >= 0.0) {
            return bad(format!("e0 must be >= 0, got {}", self.e0));
        }
        for k in 0..=self.j {
            let g = self.gamma(k);
            if !(g > 0.0) {
                return bad(format!(
                    "gamma0 + nu_visc*k^alpha must be > 0, fails at k={k} (gamma={g})"
                ));
            }
        }
        if !(self.r >= 1.0) {
            return bad(format!("r must be >= 1, got {}", self.r));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.rho > 0.0) {
            return bad(format!("rho must be > 0, got {}", self.rho));
        }
        if let Some(s) = self.sigma_obs {
            if !(s > 0.0) {
                return bad(format!("sigma_obs must be > 0, got {s}"));
            }
        }
        if let OmegaSpec::PerMode(w) = &self.omega {
            if w.len() != self.j {
                return bad(format!("omega.per_mode has {} entries, expected j={}", w.len(), self.j));
            }
        }
        if !self.forcing.is_empty() && self.forcing.len() != self.dim() {
            return bad(format!(
                "forcing has {} entries, expected 0 or 2j+1={}",
                self.forcing.len(),
                self.dim()
            ));
        }
        if let Some(spec) = &self.jump_spec {
            spec.validate(self.j)?;
        }
        Ok(())
    }
}

/// Coefficient stream of the turbulence model.
#[derive(Debug)]
pub struct TurbulenceStream {
    params: TurbulenceParams,
    base_blocks: Vec<DMatrix<f64>>,
    sigma: Operator,
    b: DVector<f64>,
    h: Operator,
    /// Chain states by step, extended on demand.
    chain: Mutex<Vec<usize>>,
}

pub fn build_turbulence(params: &TurbulenceParams) -> Result<TurbulenceStream> {
    params.validate()?;
    let d = params.dim();
    let mut base_blocks = Vec::with_capacity(params.j + 1);
    base_blocks.push(DMatrix::from_element(1, 1, (-params.gamma(0) * params.h).exp()));
    for k in 1..=params.j {
        let damp = (-params.gamma(k) * params.h).exp();
        let (s, c) = (params.omega_k(k) * params.h).sin_cos();
        base_blocks.push(DMatrix::from_row_slice(2, 2, &[c, s, -s, c]) * damp);
    }
    let diag: Vec<f64> = (0..d)
        .map(|i| params.sigma_kk(TurbulenceParams::wavenumber(i)))
        .collect();
    let b = if params.forcing.is_empty() {
        DVector::zeros(d)
    } else {
        DVector::from_iterator(d, params.forcing.iter().map(|f| f * params.h))
    };
    let h = match params.obs_scale() {
        Some(scale) => Operator::ScaledIdentity { dim: d, scale },
        None => Operator::zeros(0, d),
    };
    let initial = params.jump_spec.as_ref().map_or(0, |s| s.initial_state);
    Ok(TurbulenceStream {
        params: params.clone(),
        base_blocks,
        sigma: Operator::diagonal(&diag),
        b,
        h,
        chain: Mutex::new(vec![initial]),
    })
}

impl TurbulenceStream {
    pub fn params(&self) -> &TurbulenceParams {
        &self.params
    }

    /// Chain state in force at `step` (0 without a jump spec).
    pub fn chain_state(&self, step: usize) -> usize {
        let Some(spec) = &self.params.jump_spec else {
            return 0;
        };
        let mut path = self.chain.lock().unwrap_or_else(|e| e.into_inner());
        while path.len() <= step {
            let n = path.len() - 1;
            let mut rng = substream(spec.seed, Domain::MarkovJump, n as u64, 0);
            let (next, _) = markov_jump_step(spec, path[n], &mut rng).expect("jump spec validated");
            path.push(next);
        }
        path[step]
    }

    /// Per-wavenumber multipliers `[λ_n]_k`, `k = 0..=J`.
    pub fn multipliers(&self, step: usize) -> Vec<f64> {
        match &self.params.jump_spec {
            Some(spec) => spec.mode_multipliers(self.chain_state(step), self.params.j),
            None => vec![1.0; self.params.j + 1],
        }
    }

    /// Dynamics blocks at `step`, one per wavenumber.
    pub fn blocks(&self, step: usize) -> Vec<DMatrix<f64>> {
        if self.params.jump_spec.is_none() {
            return self.base_blocks.clone();
        }
        self.base_blocks
            .iter()
            .zip(self.multipliers(step))
            .map(|(b, m)| b * m)
            .collect()
    }
}

impl CoefficientStream for TurbulenceStream {
    fn state_dim(&self) -> usize {
        self.params.dim()
    }

    fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    fn coefficients(&self, step: usize) -> StepCoefficients {
        StepCoefficients {
            a: Operator::BlockDiagonal(self.blocks(step)),
            b: self.b.clone(),
            sigma: self.sigma.clone(),
            h: self.h.clone(),
        }
    }

    fn is_time_homogeneous(&self) -> bool {
        self.params.jump_spec.is_none()
    }
}
