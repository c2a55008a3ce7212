use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{draw_truth_start, tail_mean, FilterSetup};
use crate::enkf::{enkf_step_with, EnkfConfig, Ensemble, InstabilityCache, StepNoise};
use crate::error::{Error, Result};
use crate::models::{simulate_truth, CoefficientStream, NoiseScaledStream};

/// Gaps below this are treated as roundoff and left out of the decay fit.
pub const GAP_FLOOR: f64 = 1e3 * f64::EPSILON;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRun {
    pub seed: u64,
    pub shift: f64,
    /// `‖X̄ₙ − X̄′ₙ‖` for `n = 0..=T`.
    pub gaps: Vec<f64>,
    /// Least-squares slope of `log gap` against `n`, if at least two gaps
    /// exceed the roundoff floor.
    pub slope: Option<f64>,
    pub spreads_identical: bool,
}

/// Least-squares fit `log y ≈ a + b x` over points with `y > floor`.
/// Returns `(b, a, R², points)`.
pub fn fit_log_slope(xs: &[f64], ys: &[f64], floor: f64) -> Option<(f64, f64, f64, usize)> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(_, &y)| y > floor && y.is_finite())
        .map(|(&x, &y)| (x, y.ln()))
        .collect();
    let n = pts.len();
    if n < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let b = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some((b, my - b * mx, r2, n))
}

/// Paired runs from initial means `X̄₀` and `X̄₀ + shift·e₀`, sharing seeds
/// and observations.
pub fn run_stability_experiment(
    stream: &dyn CoefficientStream,
    cfg: &EnkfConfig,
    setup: &FilterSetup,
    shifts: &[f64],
    seeds: &[u64],
) -> Result<Vec<StabilityRun>> {
    let d = stream.state_dim();
    setup.validate(d)?;
    cfg.validate(d)?;
    let jobs: Vec<(u64, f64)> = seeds
        .iter()
        .flat_map(|&s| shifts.iter().map(move |&m| (s, m)))
        .collect();
    jobs.par_iter()
        .map(|&(seed, shift)| {
            let truth = simulate_truth(stream, &draw_truth_start(setup, seed), setup.steps, seed)?;
            let mut a = Ensemble::sample(&setup.initial_mean, &setup.initial_cov, cfg.k, seed)?;
            let mut delta = DVector::zeros(d);
            delta[0] = shift;
            let mut b = a.shifted(&delta);
            let mut cache = InstabilityCache::default();
            let params = cfg.augmented();
            let mut gaps = vec![(&a.mean - &b.mean).norm()];
            let mut identical = true;
            for n in 0..setup.steps {
                let coeffs = stream.coefficients(n);
                let plus = cache.get(&coeffs, &params).clone();
                let y = &truth.observations[n];
                let noise = StepNoise { seed, step: n };
                a = enkf_step_with(&a, &coeffs, &plus, y, cfg, noise)?.0;
                b = enkf_step_with(&b, &coeffs, &plus, y, cfg, noise)?.0;
                identical &= a.spread == b.spread;
                gaps.push((&a.mean - &b.mean).norm());
            }
            let xs: Vec<f64> = (0..gaps.len()).map(|n| n as f64).collect();
            let slope = fit_log_slope(&xs, &gaps, GAP_FLOOR).map(|f| f.0);
            Ok(StabilityRun {
                seed,
                shift,
                gaps,
                slope,
                spreads_identical: identical,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub eps: f64,
    /// Seed average of the time-averaged `|eₙ|` over the last half of the run.
    pub mean_error: f64,
    pub error_over_eps: f64,
    pub per_seed: Vec<f64>,
}

/// Runs the filter on the system with noises scaled by `ε` and `ρ → ε²ρ`;
/// initial conditions are scaled by `ε` as well.
pub fn run_accuracy_experiment(
    stream: &dyn CoefficientStream,
    cfg: &EnkfConfig,
    setup: &FilterSetup,
    eps_list: &[f64],
    seeds: &[u64],
) -> Result<Vec<AccuracyRow>> {
    let d = stream.state_dim();
    setup.validate(d)?;
    cfg.validate(d)?;
    if let Some(bad) = eps_list.iter().find(|e| !(**e > 0.0)) {
        return Err(Error::InvalidParams(format!("eps={bad} must be > 0")));
    }
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let scaled = NoiseScaledStream::new(stream, eps)?;
        let scfg = EnkfConfig {
            rho: eps * eps * cfg.rho,
            ..*cfg
        };
        let ssetup = FilterSetup {
            steps: setup.steps,
            initial_mean: &setup.initial_mean * eps,
            initial_cov: setup.initial_cov.scale(eps * eps),
            reference: None,
        };
        let per_seed: Vec<f64> = seeds
            .par_iter()
            .map(|&seed| {
                let errors = filter_errors(&scaled, &scfg, &ssetup, seed)?;
                Ok(tail_mean(&errors, errors.len().div_ceil(2)))
            })
            .collect::<Result<_>>()?;
        let mean_error = per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64;
        rows.push(AccuracyRow {
            eps,
            mean_error,
            error_over_eps: mean_error / eps,
            per_seed,
        });
    }
    Ok(rows)
}

/// `|eₙ|` for `n = 1..=T`.
fn filter_errors(stream: &dyn CoefficientStream, cfg: &EnkfConfig, setup: &FilterSetup, seed: u64) -> Result<Vec<f64>> {
    let truth = simulate_truth(stream, &draw_truth_start(setup, seed), setup.steps, seed)?;
    let mut ens = Ensemble::sample(&setup.initial_mean, &setup.initial_cov, cfg.k, seed)?;
    let mut cache = InstabilityCache::default();
    let params = cfg.augmented();
    let mut out = Vec::with_capacity(setup.steps);
    for n in 0..setup.steps {
        let coeffs = stream.coefficients(n);
        let plus = cache.get(&coeffs, &params).clone();
        ens = enkf_step_with(
            &ens,
            &coeffs,
            &plus,
            &truth.observations[n],
            cfg,
            StepNoise { seed, step: n },
        )?
        .0;
        out.push((&ens.mean - &truth.states[n + 1]).norm());
    }
    Ok(out)
}
