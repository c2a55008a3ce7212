//! Monitored sequences of a filter run and the experiments built on them.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enkf::{enkf_step_with, EnkfConfig, Ensemble, InstabilityCache, StepNoise};
use crate::error::{Error, Result};
use crate::kalman_ref::{propagate, reference_sequence, stationary_reference, AugmentedParams, ReferenceCovariance};
use crate::linalg::{loewner_ratio, Operator, SymMatrix};
use crate::models::{simulate_truth, CoefficientStream, TurbulenceParams, TurbulenceStream};
use crate::rng::{standard_normal_vector, substream, Domain};

mod concentration;
mod experiments;
pub mod output;

pub use concentration::{
    concentration_ratios, run_concentration_experiment, ConcentrationConfig, ConcentrationReport, ConcentrationTrial,
    RareEventRow, TailFit, TailRow,
};
pub use experiments::{fit_log_slope, run_accuracy_experiment, run_stability_experiment, AccuracyRow, StabilityRun};

/// One row of the monitored time series, after `step` assimilations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterDiagnostics {
    pub step: usize,
    /// `(1/d) eᵀ (C + ρI)⁻¹ e`.
    pub maha_sq_per_d: f64,
    pub l2_error: f64,
    pub nu: f64,
    pub lambda: f64,
    pub mu: f64,
    pub chi: f64,
    /// `‖C R̃⁻¹‖`.
    pub cov_fidelity: f64,
}

impl FilterDiagnostics {
    pub const COLUMNS: [&'static str; 8] = [
        "step",
        "maha_sq_per_d",
        "l2_error",
        "nu",
        "lambda",
        "mu",
        "chi",
        "cov_fidelity",
    ];

    pub fn metrics(&self) -> [f64; 7] {
        [
            self.maha_sq_per_d,
            self.l2_error,
            self.nu,
            self.lambda,
            self.mu,
            self.chi,
            self.cov_fidelity,
        ]
    }
}

/// `λ` and `μ` of one forecast.
///
/// `λ = max(1, inf{t: Ĉ^{τρ} ⪯ t(rACAᵀ + rΣ⁺ + rτρI)})` and
/// `μ = max(1, inf{t: (Ĉ^{τρ})⁻¹ ⪯ t(rACAᵀ + rΣ⁺ + τρI)⁻¹})`.
pub fn compute_lambda_mu(
    c_hat_taurho: &SymMatrix,
    a: &Operator,
    c_prev: &SymMatrix,
    sigma_plus: &SymMatrix,
    r: f64,
    tau: f64,
    rho: f64,
) -> Result<(f64, f64)> {
    let core = propagate(a, c_prev).add(sigma_plus).scale(r);
    let base_lambda = core.add_identity(r * tau * rho);
    let base_mu = core.add_identity(tau * rho);
    let lambda = loewner_ratio(c_hat_taurho, &base_lambda)?.max(1.0);
    let mu = loewner_ratio(&base_mu, c_hat_taurho)?.max(1.0);
    Ok((lambda, mu))
}

/// `max(1, inf{ν: C ⪯ ν R̃})`.
pub fn compute_nu(c: &SymMatrix, r_ref: &SymMatrix) -> Result<f64> {
    Ok(loewner_ratio(c, r_ref)?.max(1.0))
}

/// Spectral norm of `C R̃⁻¹`.
pub fn cov_fidelity(c: &SymMatrix, r_ref: &SymMatrix) -> Result<f64> {
    let chol = r_ref.cholesky()?;
    // (C R̃⁻¹)ᵀ = R̃⁻¹ C.
    let x = chol.solve_matrix(c.as_matrix());
    Ok(SymMatrix::from_factor(&x.transpose()).max_eigenvalue().max(0.0).sqrt())
}

/// `eᵀ (S Sᵀ/(K−1) + ρI)⁻¹ e` through the ensemble-space identity.
pub fn mahalanobis_low_rank(e: &DVector<f64>, spread: &DMatrix<f64>, rho: f64) -> Result<f64> {
    let k = spread.ncols();
    if k < 2 || spread.nrows() != e.len() {
        return Err(Error::dims("spread does not match the error vector"));
    }
    if !(rho > 0.0) {
        return Err(Error::InvalidParams(format!("rho={rho} must be > 0")));
    }
    let u = spread / ((k - 1) as f64).sqrt();
    let inner = SymMatrix::symmetrized(u.tr_mul(&u)).add_identity(rho).cholesky()?;
    let ute = u.tr_mul(e);
    let t = inner.solve(&ute);
    Ok((e.norm_squared() - ute.dot(&t)) / rho)
}

/// Initial conditions and the reference sequence of a filter experiment.
#[derive(Debug, Clone)]
pub struct FilterSetup {
    pub steps: usize,
    /// Truth and ensemble are drawn from `N(initial_mean, initial_cov)`.
    pub initial_mean: DVector<f64>,
    pub initial_cov: SymMatrix,
    pub reference: Option<ReferenceCovariance>,
}

impl FilterSetup {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidParams("T must be >= 1".into()));
        }
        if self.initial_mean.len() != d || self.initial_cov.dim() != d {
            return Err(Error::dims(format!("initial conditions do not match d={d}")));
        }
        Ok(())
    }
}

/// `diag(E_k / 2)`, the stationary covariance of the unfiltered model.
pub fn turbulence_climatology(params: &TurbulenceParams) -> SymMatrix {
    let diag: Vec<f64> = (0..params.dim())
        .map(|i| 0.5 * params.energy(TurbulenceParams::wavenumber(i)))
        .collect();
    SymMatrix::from_diagonal(&diag)
}

/// `R̃ₙ` for a turbulence stream: the stationary solution when the model is
/// observed and time-homogeneous, the iterated recursion from the
/// climatology when observed with jumps, and `None` for an unobserved model
/// (its unstable modes have no bounded reference).
pub fn turbulence_reference(stream: &TurbulenceStream, steps: usize) -> Result<Option<ReferenceCovariance>> {
    let params = stream.params();
    if params.sigma_obs.is_none() {
        return Ok(None);
    }
    if stream.is_time_homogeneous() {
        return Ok(Some(ReferenceCovariance::Stationary(stationary_reference(params)?)));
    }
    reference_sequence(
        stream,
        &AugmentedParams::of_turbulence(params),
        turbulence_climatology(params),
        steps,
        0,
    )
    .map(Some)
}

/// Truth initial state of seed `seed`.
pub(crate) fn draw_truth_start(setup: &FilterSetup, seed: u64) -> DVector<f64> {
    let f = setup.initial_cov.psd_factor();
    let mut rng = substream(seed, Domain::InitialEnsemble, 1, 0);
    &setup.initial_mean + &f * standard_normal_vector(&mut rng, f.ncols())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub series: Vec<FilterDiagnostics>,
    /// Steps where `rank(Ŝ) < p`.
    pub rank_deficit_steps: usize,
    pub max_unrepresented: usize,
}

/// Mean and quantiles of one metric across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Spread {
        let mut v: Vec<f64> = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            if v.is_empty() {
                return f64::NAN;
            }
            // Linear interpolation between order statistics.
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Spread {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            q05: q(0.05),
            q50: q(0.5),
            q95: q(0.95),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    /// In the order of [`FilterDiagnostics::metrics`].
    pub metrics: [Spread; 7],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterExperiment {
    pub runs: Vec<SeedRun>,
    pub summary: Vec<StepSummary>,
}

/// Runs truth and filter for one seed and records every diagnostic.
pub fn run_filter_seed(
    stream: &dyn CoefficientStream,
    cfg: &EnkfConfig,
    setup: &FilterSetup,
    seed: u64,
) -> Result<SeedRun> {
    let d = stream.state_dim();
    setup.validate(d)?;
    cfg.validate(d)?;
    let truth = simulate_truth(stream, &draw_truth_start(setup, seed), setup.steps, seed)?;
    let mut ens = Ensemble::sample(&setup.initial_mean, &setup.initial_cov, cfg.k, seed)?;
    let params = cfg.augmented();
    let mut cache = InstabilityCache::default();
    let mut series = Vec::with_capacity(setup.steps);
    let (mut deficit, mut unrep) = (0, 0);
    for n in 0..setup.steps {
        let coeffs = stream.coefficients(n);
        let plus = cache.get(&coeffs, &params).clone();
        let c_prev = ens.covariance();
        let (next, rec) = enkf_step_with(
            &ens,
            &coeffs,
            &plus,
            &truth.observations[n],
            cfg,
            StepNoise { seed, step: n },
        )?;
        deficit += rec.rank_deficit as usize;
        unrep = unrep.max(rec.unrepresented);

        let k = cfg.k;
        let c_hat = SymMatrix::from_factor(&(&rec.forecast_spread / ((k - 1) as f64).sqrt()))
            .add_identity(cfg.additive_level());
        let (lambda, mu) = compute_lambda_mu(&c_hat, &coeffs.a, &c_prev, &plus.to_sym(), cfg.r, cfg.tau, cfg.rho)?;

        let e = &next.mean - &truth.states[n + 1];
        let c = next.covariance();
        let (nu, fidelity) = match &setup.reference {
            Some(reference) => {
                let r_ref = reference.at(n + 1);
                (compute_nu(&c, r_ref)?, cov_fidelity(&c, r_ref)?)
            }
            None => (f64::NAN, f64::NAN),
        };
        series.push(FilterDiagnostics {
            step: n + 1,
            maha_sq_per_d: mahalanobis_low_rank(&e, &next.spread, cfg.rho)? / d as f64,
            l2_error: e.norm(),
            nu,
            lambda,
            mu,
            chi: rec.chi,
            cov_fidelity: fidelity,
        });
        ens = next;
    }
    Ok(SeedRun {
        seed,
        series,
        rank_deficit_steps: deficit,
        max_unrepresented: unrep,
    })
}

/// [`run_filter_seed`] over all seeds, in parallel, with per-step summaries.
pub fn run_filter_experiment(
    stream: &dyn CoefficientStream,
    cfg: &EnkfConfig,
    setup: &FilterSetup,
    seeds: &[u64],
) -> Result<FilterExperiment> {
    let runs: Vec<SeedRun> = seeds
        .par_iter()
        .map(|&s| run_filter_seed(stream, cfg, setup, s))
        .collect::<Result<_>>()?;
    let summary = summarize(&runs, setup.steps);
    Ok(FilterExperiment { runs, summary })
}

fn summarize(runs: &[SeedRun], steps: usize) -> Vec<StepSummary> {
    (0..steps)
        .map(|n| {
            let metrics = std::array::from_fn(|m| {
                let vals: Vec<f64> = runs.iter().map(|r| r.series[n].metrics()[m]).collect();
                Spread::of(&vals)
            });
            StepSummary { step: n + 1, metrics }
        })
        .collect()
}

/// Mean of `values[values.len() − window ..]`.
pub fn tail_mean(values: &[f64], window: usize) -> f64 {
    let w = window.min(values.len());
    values[values.len() - w..].iter().sum::<f64>() / w as f64
}
