//! Sampling concentration of a noncentral forecast covariance.
//!
//! With `C = Σ aₖaₖᵀ/(K−1)`, `D = C + Σ` and
//! `Z = Σ (aₖ + Δξₖ)(aₖ + Δξₖ)ᵀ/(K−1)`, a trial records
//! `λ = inf{t: Z ⪯ t(D + ρI)}` and `μ = inf{t: (Z + ρI)⁻¹ ⪯ t(D + ρI)⁻¹}`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::experiments::fit_log_slope;
use crate::error::{Error, Result};
use crate::linalg::{loewner_ratio, orthonormal_basis, SymMatrix};
use crate::rng::{standard_normal_matrix, substream, Domain};
use crate::sampling::random_orthonormal;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcentrationConfig {
    pub d: usize,
    pub p: usize,
    pub k_list: Vec<usize>,
    #[serde(default = "defaults::rho")]
    pub rho: f64,
    #[serde(default = "defaults::delta")]
    pub delta: f64,
    #[serde(default = "defaults::trials")]
    pub trials: usize,
    /// Target condition numbers of `C + ρI`.
    #[serde(default = "defaults::conditions")]
    pub condition_numbers: Vec<f64>,
    /// Ensemble size of the tail study.
    #[serde(default = "defaults::tail_k")]
    pub tail_k: usize,
    /// Offsets `t` of the thresholds `8 + t`.
    #[serde(default = "defaults::tail_grid")]
    pub tail_grid: Vec<f64>,
    /// Tail points need at least this many exceedances to enter the fit.
    #[serde(default = "defaults::min_count")]
    pub min_count: usize,
    /// Tail points above this exceedance probability belong to the bulk and
    /// are left out of the fit.
    #[serde(default = "defaults::tail_max_probability")]
    pub tail_max_probability: f64,
}

mod defaults {
    pub fn rho() -> f64 {
        0.04
    }
    pub fn delta() -> f64 {
        0.1
    }
    pub fn trials() -> usize {
        2000
    }
    pub fn conditions() -> Vec<f64> {
        vec![10.0, 1e3]
    }
    pub fn tail_k() -> usize {
        20
    }
    pub fn tail_grid() -> Vec<f64> {
        (0..=124).map(|i| -7.5 + 0.125 * i as f64).collect()
    }
    pub fn min_count() -> usize {
        20
    }
    pub fn tail_max_probability() -> f64 {
        0.5
    }
}

impl ConcentrationConfig {
    pub fn new(d: usize, p: usize, k_list: Vec<usize>) -> Self {
        ConcentrationConfig {
            d,
            p,
            k_list,
            rho: defaults::rho(),
            delta: defaults::delta(),
            trials: defaults::trials(),
            condition_numbers: defaults::conditions(),
            tail_k: defaults::tail_k(),
            tail_grid: defaults::tail_grid(),
            min_count: defaults::min_count(),
            tail_max_probability: defaults::tail_max_probability(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || 2 * self.p > self.d {
            return Err(Error::InvalidParams(format!(
                "concentration needs 1 <= p and 2p <= d, got p={} d={}",
                self.p, self.d
            )));
        }
        if self.k_list.iter().any(|&k| k < 2) {
            return Err(Error::InvalidParams("every K in k_list must be >= 2".into()));
        }
        if !(self.rho > 0.0) || !(self.delta > 0.0) {
            return Err(Error::InvalidParams("rho and delta must be > 0".into()));
        }
        if self.condition_numbers.iter().any(|&c| !(c > 1.0)) {
            return Err(Error::InvalidParams("condition numbers must be > 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationTrial {
    pub d: usize,
    pub p: usize,
    pub k: usize,
    pub rho: f64,
    pub delta: f64,
    pub condition: f64,
    pub lambda: f64,
    pub mu: f64,
    pub in_rare_event: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RareEventRow {
    pub k: usize,
    pub condition: f64,
    pub trials: usize,
    pub rare_events: usize,
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub condition: f64,
    pub k: usize,
    pub t: f64,
    pub exceedances: usize,
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub condition: f64,
    pub k: usize,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub config: ConcentrationConfig,
    pub seed: u64,
    pub rare: Vec<RareEventRow>,
    /// Fraction of adjacent `K` pairs with non-increasing rare-event
    /// probability, per condition number.
    pub monotone_fraction: Vec<(f64, f64)>,
    pub tail: Vec<TailRow>,
    pub fits: Vec<TailFit>,
}

/// `λ` and `μ` for spreads `a` (`d × K`), centered noise draws `Δξ` and
/// `Σ = F Fᵀ`. Every matrix involved acts as `ρI` (or zero) off the span
/// `W` of `[a, F]`, so the ratios are evaluated in an orthonormal frame of `W`.
pub fn concentration_ratios(
    a: &DMatrix<f64>,
    dxi: &DMatrix<f64>,
    sigma_factor: &DMatrix<f64>,
    rho: f64,
) -> Result<(f64, f64)> {
    let (d, k) = a.shape();
    if dxi.shape() != (d, k) || sigma_factor.nrows() != d || k < 2 {
        return Err(Error::dims("concentration inputs disagree in shape"));
    }
    let s = sigma_factor.ncols();
    let mut cat = DMatrix::zeros(d, k + s);
    cat.columns_mut(0, k).copy_from(a);
    cat.columns_mut(k, s).copy_from(sigma_factor);
    let w = orthonormal_basis(&cat);
    let scale = 1.0 / ((k - 1) as f64).sqrt();
    let c = SymMatrix::from_factor(&(w.tr_mul(a) * scale));
    let z = SymMatrix::from_factor(&(w.tr_mul(&(a + dxi)) * scale));
    let d_rho = c
        .add(&SymMatrix::from_factor(&w.tr_mul(sigma_factor)))
        .add_identity(rho);
    let lambda = loewner_ratio(&z, &d_rho)?;
    let mut mu = loewner_ratio(&d_rho, &z.add_identity(rho))?;
    if w.ncols() < d {
        mu = mu.max(1.0);
    }
    Ok((lambda, mu))
}

/// One trial: `aₖ` i.i.d. Gaussian in a random `p`-dimensional subspace,
/// scaled so that `C + ρI` has condition number `condition`, and `Σ` the
/// projector onto an independent random `p`-dimensional subspace.
fn trial(cfg: &ConcentrationConfig, k: usize, condition: f64, seed: u64, index: u64, tag: u64) -> Result<(f64, f64)> {
    let (d, p) = (cfg.d, cfg.p);
    let mut rng = substream(seed, Domain::Concentration, index, tag);
    let u = random_orthonormal(&mut rng, d, p);
    let v = random_orthonormal(&mut rng, d, p);
    let mut alpha = standard_normal_matrix(&mut rng, p, k);
    let top = SymMatrix::from_factor(&(&alpha / ((k - 1) as f64).sqrt())).max_eigenvalue();
    if top > 0.0 {
        alpha *= (cfg.rho * (condition - 1.0) / top).sqrt();
    }
    let a = &u * alpha;
    let mut xi = &v * standard_normal_matrix(&mut rng, p, k);
    let mean = xi.column_sum() / k as f64;
    for mut col in xi.column_iter_mut() {
        col -= &mean;
    }
    concentration_ratios(&a, &xi, &v, cfg.rho)
}

pub fn run_concentration_experiment(
    cfg: &ConcentrationConfig,
    seed: u64,
) -> Result<(ConcentrationReport, Vec<ConcentrationTrial>)> {
    cfg.validate()?;
    let bar = 1.0 + 5.0 * cfg.delta;
    let mut trials = Vec::new();
    let mut rare = Vec::new();
    let mut monotone = Vec::new();
    let mut tail = Vec::new();
    let mut fits = Vec::new();
    for (ci, &condition) in cfg.condition_numbers.iter().enumerate() {
        let mut probs = Vec::new();
        let mut k_list = cfg.k_list.clone();
        if !k_list.contains(&cfg.tail_k) {
            k_list.push(cfg.tail_k);
        }
        for (ki, &k) in k_list.iter().enumerate() {
            let tag = (ci as u64) << 32 | ki as u64;
            let ratios: Vec<(f64, f64)> = (0..cfg.trials as u64)
                .into_par_iter()
                .map(|i| trial(cfg, k, condition, seed, i, tag))
                .collect::<Result<_>>()?;
            let count = ratios.iter().filter(|(l, m)| *l > bar || *m > bar).count();
            if cfg.k_list.contains(&k) {
                let probability = count as f64 / cfg.trials as f64;
                probs.push(probability);
                rare.push(RareEventRow {
                    k,
                    condition,
                    trials: cfg.trials,
                    rare_events: count,
                    probability,
                });
            }
            if k == cfg.tail_k {
                let mut ts = Vec::new();
                let mut ps = Vec::new();
                for &t in &cfg.tail_grid {
                    let exceed = ratios.iter().filter(|(l, _)| *l > 8.0 + t).count();
                    let probability = exceed as f64 / cfg.trials as f64;
                    tail.push(TailRow {
                        condition,
                        k,
                        t,
                        exceedances: exceed,
                        probability,
                    });
                    if exceed >= cfg.min_count && probability <= cfg.tail_max_probability {
                        ts.push(t);
                        ps.push(probability);
                    }
                }
                if let Some((slope, intercept, r_squared, points)) = fit_log_slope(&ts, &ps, 0.0) {
                    fits.push(TailFit {
                        condition,
                        k,
                        slope,
                        intercept,
                        r_squared,
                        points,
                    });
                }
            }
            trials.extend(ratios.iter().map(|&(lambda, mu)| ConcentrationTrial {
                d: cfg.d,
                p: cfg.p,
                k,
                rho: cfg.rho,
                delta: cfg.delta,
                condition,
                lambda,
                mu,
                in_rare_event: lambda > bar || mu > bar,
            }));
        }
        let pairs = probs.len().saturating_sub(1);
        let ok = probs.windows(2).filter(|w| w[1] <= w[0]).count();
        monotone.push((condition, if pairs == 0 { 1.0 } else { ok as f64 / pairs as f64 }));
    }
    Ok((
        ConcentrationReport {
            config: cfg.clone(),
            seed,
            rare,
            monotone_fraction: monotone,
            tail,
            fits,
        },
        trials,
    ))
}
