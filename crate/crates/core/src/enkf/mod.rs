//! Ensemble Kalman filter with instability noise, multiplicative and
//! additive inflation, and a rank-`p` spectral projection of the posterior.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman_ref::{instability_covariance, AugmentedParams, InstabilityCovariance};
use crate::linalg::{
    orthonormal_basis, subspace, KalmanGainContext, Operator, SymMatrix, DENSE_EIGEN_MAX_DIM, PINV_REL_TOL,
};
use crate::models::StepCoefficients;
use crate::rng::{standard_normal_vector, substream, Domain};

/// Ensemble as mean plus spread (columns are deviations from the mean).
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub mean: DVector<f64>,
    pub spread: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(mean: DVector<f64>, spread: DMatrix<f64>) -> Result<Self> {
        if spread.ncols() < 2 {
            return Err(Error::InvalidParams(format!(
                "ensemble size K={} must be >= 2",
                spread.ncols()
            )));
        }
        if spread.nrows() != mean.len() {
            return Err(Error::dims(format!(
                "spread has {} rows, mean has length {}",
                spread.nrows(),
                mean.len()
            )));
        }
        let sums = spread.column_sum();
        if sums.amax() > 1e-10 {
            return Err(Error::InvalidParams(format!(
                "spread columns must sum to zero, max row sum is {:e}",
                sums.amax()
            )));
        }
        Ok(Ensemble { mean, spread })
    }

    /// Ensemble from a `d × K` matrix of members.
    pub fn from_members(members: &DMatrix<f64>) -> Result<Self> {
        let k = members.ncols();
        if k < 2 {
            return Err(Error::InvalidParams(format!("ensemble size K={k} must be >= 2")));
        }
        let mean = members.column_sum() / k as f64;
        let mut spread = members.clone();
        for mut col in spread.column_iter_mut() {
            col -= &mean;
        }
        Ok(Ensemble { mean, spread })
    }

    /// `K` members drawn from `N(mean, cov)`, member `k` from its own substream.
    pub fn sample(mean: &DVector<f64>, cov: &SymMatrix, k: usize, seed: u64) -> Result<Self> {
        if cov.dim() != mean.len() {
            return Err(Error::dims("initial covariance does not match the mean"));
        }
        let f = cov.psd_factor();
        let mut members = DMatrix::zeros(mean.len(), k);
        for j in 0..k {
            let mut rng = substream(seed, Domain::InitialEnsemble, 0, j as u64);
            let z = standard_normal_vector(&mut rng, f.ncols());
            members.set_column(j, &(mean + &f * z));
        }
        Self::from_members(&members)
    }

    /// Same spread, mean moved by `delta`.
    pub fn shifted(&self, delta: &DVector<f64>) -> Self {
        Ensemble {
            mean: &self.mean + delta,
            spread: self.spread.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn size(&self) -> usize {
        self.spread.ncols()
    }

    pub fn members(&self) -> DMatrix<f64> {
        let mut m = self.spread.clone();
        for mut col in m.column_iter_mut() {
            col += &self.mean;
        }
        m
    }

    /// `S Sᵀ / (K−1)`.
    pub fn covariance(&self) -> SymMatrix {
        SymMatrix::from_factor(&(&self.spread / ((self.size() - 1) as f64).sqrt()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnkfConfig {
    /// Ensemble size `K`.
    pub k: usize,
    /// Projection rank `p`.
    pub p: usize,
    pub r: f64,
    pub rho: f64,
    pub tau: f64,
}

impl EnkfConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidParams(format!("K={} must be >= 2", self.k)));
        }
        if self.p < 1 || self.p > d {
            return Err(Error::InvalidParams(format!(
                "p={} must satisfy 1 <= p <= d={d}",
                self.p
            )));
        }
        self.augmented().validate()
    }

    pub fn augmented(&self) -> AugmentedParams {
        AugmentedParams {
            r: self.r,
            tau: self.tau,
            rho: self.rho,
        }
    }

    pub fn additive_level(&self) -> f64 {
        self.tau * self.rho
    }
}

/// Randomness of one filter step: member `k` draws its forecast noise from
/// the substream `(seed, step, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepNoise {
    pub seed: u64,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub mean: DVector<f64>,
    pub spread: DMatrix<f64>,
}

/// Forecast with a precomputed `Σ⁺`.
pub fn enkf_forecast_with(
    ens: &Ensemble,
    coeffs: &StepCoefficients,
    plus: &InstabilityCovariance,
    cfg: &EnkfConfig,
    noise: StepNoise,
) -> Result<Forecast> {
    let d = coeffs.state_dim();
    if ens.dim() != d || plus.dim() != d {
        return Err(Error::dims(format!(
            "ensemble dim {} / instability dim {} vs model d={d}",
            ens.dim(),
            plus.dim()
        )));
    }
    let k = ens.size();
    let mut xi = DMatrix::zeros(d, k);
    if !plus.is_zero() {
        for j in 0..k {
            let mut rng = substream(noise.seed, Domain::ForecastNoise, noise.step as u64, j as u64);
            xi.set_column(j, &plus.sample(&mut rng));
        }
    }
    let xi_mean = xi.column_sum() / k as f64;
    for mut col in xi.column_iter_mut() {
        col -= &xi_mean;
    }
    let mean = coeffs.a.apply(&ens.mean) + &coeffs.b + xi_mean;
    let spread = (coeffs.a.apply_mat(&ens.spread) + xi) * cfg.r.sqrt();
    Ok(Forecast { mean, spread })
}

pub fn enkf_forecast(
    ens: &Ensemble,
    coeffs: &StepCoefficients,
    cfg: &EnkfConfig,
    noise: StepNoise,
) -> Result<Forecast> {
    let plus = instability_covariance(coeffs, &cfg.augmented());
    enkf_forecast_with(ens, coeffs, &plus, cfg, noise)
}

/// How the leading eigenpairs of `𝒦(Ĉ^{τρ})` were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenPath {
    /// `H = h·I`: the spectrum follows from the SVD of `Ŝ`.
    ScaledIdentity,
    /// Rayleigh–Ritz on the invariant subspace `span(Ŝ, Hᵀ)`.
    Subspace,
    Dense,
    Iterative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub forecast_mean: DVector<f64>,
    pub forecast_spread: DMatrix<f64>,
    pub posterior: Ensemble,
    /// `Y − H X̄̂`.
    pub gain_residual: DVector<f64>,
    /// `max(1, ρ_{p+1} / ρ)`.
    pub chi: f64,
    /// The (p+1)-th eigenvalue of `𝒦(Ĉ^{τρ})`, 0 when `p = d`.
    pub projection_discard: f64,
    /// Top-p eigenvalues of `𝒦(Ĉ^{τρ})`.
    pub posterior_eigenvalues: Vec<f64>,
    /// `C⁺ = basis · diag(weights) · basisᵀ`, the projected target.
    pub target_basis: DMatrix<f64>,
    pub target_weights: Vec<f64>,
    /// Numerical rank of `Ŝ`.
    pub spread_rank: usize,
    /// `rank(Ŝ) < p`.
    pub rank_deficit: bool,
    /// Positive target directions the spread could not carry (needs `K−1` room).
    pub unrepresented: usize,
    pub instability_rank: usize,
    pub path: EigenPath,
}

impl StepRecord {
    pub fn target_covariance(&self) -> SymMatrix {
        let w = DVector::from_vec(self.target_weights.iter().map(|v| v.sqrt()).collect());
        let f = &self.target_basis * DMatrix::from_diagonal(&w);
        SymMatrix::from_factor(&f)
    }
}

/// Thin SVD of `Ŝ` through a QR factorization: `Ŝ = Ψ Λ Φᵀ` with the
/// singular values above the pseudo-inverse threshold.
struct SpreadSvd {
    psi: DMatrix<f64>,
    sigma: Vec<f64>,
    phi: DMatrix<f64>,
}

fn spread_svd(s: &DMatrix<f64>) -> SpreadSvd {
    let (d, k) = s.shape();
    let (q, r) = if d >= k {
        let qr = s.clone().qr();
        (qr.q(), qr.r())
    } else {
        (DMatrix::identity(d, d), s.clone())
    };
    let (u, singular_values, vt) = small_svd(&r);
    let mut order: Vec<usize> = (0..singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        singular_values[b]
            .partial_cmp(&singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let smax = order.first().map_or(0.0, |&i| singular_values[i]);
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&i| smax > 0.0 && singular_values[i] > PINV_REL_TOL * smax)
        .collect();
    let m = kept.len();
    let mut psi = DMatrix::zeros(d, m);
    let mut phi = DMatrix::zeros(k, m);
    let mut sigma = Vec::with_capacity(m);
    for (c, &i) in kept.iter().enumerate() {
        psi.set_column(c, &(&q * u.column(i)));
        phi.set_column(c, &vt.row(i).transpose());
        sigma.push(singular_values[i]);
    }
    SpreadSvd { psi, sigma, phi }
}

/// SVD of a small matrix. The QR iteration is capped; if it stalls the
/// factors come from the eigendecomposition of `RᵀR`.
fn small_svd(r: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    if let Some(svd) = r.clone().try_svd(true, true, f64::EPSILON, 10_000) {
        return (
            svd.u.expect("requested"),
            svd.singular_values,
            svd.v_t.expect("requested"),
        );
    }
    let e = SymMatrix::from_factor(&r.transpose()).eigen();
    let n = e.eigenvalues.len().min(r.nrows());
    let sigma = DVector::from_fn(n, |i, _| e.eigenvalues[i].max(0.0).sqrt());
    let v = e.eigenvectors.columns(0, n).into_owned();
    let mut u = r * &v;
    for (i, mut col) in u.column_iter_mut().enumerate() {
        if sigma[i] > 0.0 {
            col /= sigma[i];
        }
    }
    (u, sigma, v.transpose())
}

/// Leading eigenpairs of `𝒦(Ĉ^{τρ})`: explicit pairs on an invariant
/// subspace, plus an eigenvalue `complement` of multiplicity `d − dim` on
/// its orthogonal complement.
struct PosteriorSpectrum {
    values: Vec<f64>,
    vectors: DMatrix<f64>,
    complement: Option<f64>,
    path: EigenPath,
}

fn scaled_identity_gain(h: &Operator, d: usize) -> Option<f64> {
    match h {
        Operator::ScaledIdentity { dim, scale } if *dim == d => Some(*scale),
        Operator::Dense(m) if m.nrows() == 0 => Some(0.0),
        _ => None,
    }
}

fn posterior_spectrum(
    ctx: &KalmanGainContext,
    svd: &SpreadSvd,
    h: &Operator,
    p: usize,
    k: usize,
) -> Result<PosteriorSpectrum> {
    let d = ctx.dim();
    let level = ctx.additive_level();
    if let Some(scale) = scaled_identity_gain(h, d) {
        let h2 = scale * scale;
        let f = |c: f64| c / (1.0 + h2 * c);
        let values = svd.sigma.iter().map(|s| f(s * s / (k - 1) as f64 + level)).collect();
        let complement = (svd.psi.ncols() < d).then(|| f(level));
        return Ok(PosteriorSpectrum {
            values,
            vectors: svd.psi.clone(),
            complement,
            path: EigenPath::ScaledIdentity,
        });
    }
    let q = h.nrows();
    if k + q < d {
        let mut cat = DMatrix::zeros(d, svd.psi.ncols() + q);
        cat.columns_mut(0, svd.psi.ncols()).copy_from(&svd.psi);
        cat.columns_mut(svd.psi.ncols(), q).copy_from(&h.transpose().to_dense());
        let w = orthonormal_basis(&cat);
        let kw = ctx.posterior_apply_mat(&w);
        let small = SymMatrix::symmetrized(w.transpose() * kw).eigen();
        return Ok(PosteriorSpectrum {
            values: small.eigenvalues.iter().copied().collect(),
            vectors: &w * &small.eigenvectors,
            complement: (w.ncols() < d).then_some(level),
            path: EigenPath::Subspace,
        });
    }
    if d <= DENSE_EIGEN_MAX_DIM {
        let full = SymMatrix::symmetrized(ctx.posterior_apply_mat(&DMatrix::identity(d, d)));
        let e = full.eigen();
        return Ok(PosteriorSpectrum {
            values: e.eigenvalues.iter().copied().collect(),
            vectors: e.eigenvectors,
            complement: None,
            path: EigenPath::Dense,
        });
    }
    let want = (p + 1).min(d);
    let res = subspace::top_eigenpairs(d, want, |x| ctx.posterior_apply_mat(x), 0.0);
    Ok(PosteriorSpectrum {
        values: res.values,
        vectors: res.vectors,
        complement: None,
        path: EigenPath::Iterative,
    })
}

/// Vectors orthonormal to the columns of `w`, completing it by `count`.
fn complete_basis(w: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    let d = w.nrows();
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(count);
    for i in 0..d {
        if out.len() == count {
            break;
        }
        let mut v = DVector::zeros(d);
        v[i] = 1.0;
        for _ in 0..2 {
            v -= w * w.tr_mul(&v);
            for u in &out {
                let dot = u.dot(&v);
                v.axpy(-dot, u, 1.0);
            }
        }
        let n = v.norm();
        if n > 1e-8 {
            out.push(v / n);
        }
    }
    DMatrix::from_columns(&out)
}

pub fn enkf_assimilate(
    forecast: &Forecast,
    coeffs: &StepCoefficients,
    y: &DVector<f64>,
    cfg: &EnkfConfig,
    step: usize,
) -> Result<(Ensemble, StepRecord)> {
    let d = coeffs.state_dim();
    let k = forecast.spread.ncols();
    cfg.validate(d)?;
    if y.len() != coeffs.obs_dim() {
        return Err(Error::dims(format!(
            "observation has length {}, expected {}",
            y.len(),
            coeffs.obs_dim()
        )));
    }
    let ctx = KalmanGainContext::new(&forecast.spread, cfg.additive_level(), &coeffs.h)?;
    let residual = y - coeffs.h.apply(&forecast.mean);
    let mean = &forecast.mean + ctx.gain_apply(&residual);

    let svd = spread_svd(&forecast.spread);
    let m = svd.sigma.len();
    let spec = posterior_spectrum(&ctx, &svd, &coeffs.h, cfg.p, k)?;

    // Merge explicit eigenvalues with the complement eigenvalue.
    let explicit = spec.values.len();
    let complement_mult = spec.complement.map_or(0, |_| d - explicit);
    let mut top: Vec<(f64, Option<usize>)> = Vec::with_capacity(cfg.p + 1);
    let (mut i, mut used_complement) = (0, 0);
    while top.len() < (cfg.p + 1).min(d) {
        let next_explicit = spec.values.get(i).copied();
        let take_complement = match (next_explicit, spec.complement) {
            (Some(v), Some(c)) => c > v && used_complement < complement_mult,
            (None, Some(_)) => used_complement < complement_mult,
            _ => false,
        };
        if take_complement {
            top.push((spec.complement.unwrap_or(0.0), None));
            used_complement += 1;
        } else if let Some(v) = next_explicit {
            top.push((v, Some(i)));
            i += 1;
        } else {
            break;
        }
    }
    let rho_next = if cfg.p < d {
        top.get(cfg.p).map_or(0.0, |t| t.0)
    } else {
        0.0
    };
    let chosen = &top[..cfg.p.min(top.len())];

    // Basis for the positive part of the projected target.
    let positive: Vec<(f64, Option<usize>)> = chosen.iter().copied().filter(|(v, _)| v - cfg.rho > 0.0).collect();
    let needs_fill = positive.iter().filter(|(_, i)| i.is_none()).count();
    let fill = if needs_fill > 0 {
        complete_basis(&spec.vectors.columns(0, explicit).into_owned(), needs_fill)
    } else {
        DMatrix::zeros(d, 0)
    };
    let mut basis = DMatrix::zeros(d, positive.len());
    let mut weights = Vec::with_capacity(positive.len());
    let mut f = 0;
    for (c, (v, idx)) in positive.iter().enumerate() {
        match idx {
            Some(j) => basis.set_column(c, &spec.vectors.column(*j)),
            None => {
                basis.set_column(c, &fill.column(f));
                f += 1;
            }
        }
        weights.push(v - cfg.rho);
    }

    // Right factors: singular vectors of Ŝ, then vectors orthogonal to both
    // them and the all-ones direction when the rank runs out.
    let want = positive.len();
    let mut phi = DMatrix::zeros(k, want);
    let from_svd = want.min(m);
    phi.columns_mut(0, from_svd).copy_from(&svd.phi.columns(0, from_svd));
    let mut represented = from_svd;
    if want > m {
        let mut taken = DMatrix::zeros(k, m + 1);
        taken.columns_mut(0, m).copy_from(&svd.phi);
        taken.set_column(m, &DVector::from_element(k, 1.0 / (k as f64).sqrt()));
        let extra = complete_basis(&taken, want - m);
        phi.columns_mut(m, extra.ncols()).copy_from(&extra);
        represented += extra.ncols();
    }
    let scale = ((k - 1) as f64).sqrt();
    let mut left = basis.clone();
    for (c, w) in weights.iter().enumerate() {
        let s = if c < represented { w.sqrt() * scale } else { 0.0 };
        left.column_mut(c).scale_mut(s);
    }
    let mut spread = left * phi.transpose();
    let drift = spread.column_sum() / k as f64;
    for mut col in spread.column_iter_mut() {
        col -= &drift;
    }

    let posterior = Ensemble { mean, spread };
    let record = StepRecord {
        step,
        forecast_mean: forecast.mean.clone(),
        forecast_spread: forecast.spread.clone(),
        posterior: posterior.clone(),
        gain_residual: residual,
        chi: (rho_next / cfg.rho).max(1.0),
        projection_discard: rho_next,
        posterior_eigenvalues: chosen.iter().map(|t| t.0).collect(),
        target_basis: basis,
        target_weights: weights,
        spread_rank: m,
        rank_deficit: m < cfg.p,
        unrepresented: want - represented,
        instability_rank: 0,
        path: spec.path,
    };
    Ok((posterior, record))
}

/// One full filter step with a precomputed `Σ⁺`.
pub fn enkf_step_with(
    ens: &Ensemble,
    coeffs: &StepCoefficients,
    plus: &InstabilityCovariance,
    y: &DVector<f64>,
    cfg: &EnkfConfig,
    noise: StepNoise,
) -> Result<(Ensemble, StepRecord)> {
    let forecast = enkf_forecast_with(ens, coeffs, plus, cfg, noise)?;
    let (post, mut rec) = enkf_assimilate(&forecast, coeffs, y, cfg, noise.step)?;
    rec.instability_rank = plus.rank();
    Ok((post, rec))
}

pub fn enkf_step(
    ens: &Ensemble,
    coeffs: &StepCoefficients,
    y: &DVector<f64>,
    cfg: &EnkfConfig,
    noise: StepNoise,
) -> Result<(Ensemble, StepRecord)> {
    let plus = instability_covariance(coeffs, &cfg.augmented());
    enkf_step_with(ens, coeffs, &plus, y, cfg, noise)
}

/// Keeps `Σ⁺` across steps while `A` and `Σ` are unchanged.
#[derive(Debug, Default)]
pub struct InstabilityCache {
    entry: Option<(Operator, Operator, InstabilityCovariance)>,
}

impl InstabilityCache {
    pub fn get(&mut self, coeffs: &StepCoefficients, params: &AugmentedParams) -> &InstabilityCovariance {
        let hit = matches!(&self.entry, Some((a, s, _)) if *a == coeffs.a && *s == coeffs.sigma);
        if !hit {
            let plus = instability_covariance(coeffs, params);
            self.entry = Some((coeffs.a.clone(), coeffs.sigma.clone(), plus));
        }
        &self.entry.as_ref().expect("filled").2
    }
}
