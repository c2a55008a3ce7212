//! Linear signal-observation systems with random coefficients.
//!
//! `X_{n+1} = A_n X_n + B_n + ξ_{n+1}`, `ξ ~ N(0, Σ_n)`, observed through
//! `Y_{n+1} = H_n X_{n+1} + ζ_{n+1}`, `ζ ~ N(0, I_q)`.

mod markov;
mod turbulence;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{Operator, SymMatrix};
use crate::rng::{standard_normal_vector, substream, Domain};

pub use markov::{markov_jump_step, stationary_distribution, JumpSpec};
pub use turbulence::{build_turbulence, OmegaSpec, TurbulenceParams, TurbulenceStream};

/// One step's `(A_n, B_n, Σ_n, H_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCoefficients {
    pub a: Operator,
    pub b: DVector<f64>,
    /// Symmetric PSD system noise covariance.
    pub sigma: Operator,
    pub h: Operator,
}

impl StepCoefficients {
    pub fn new(a: Operator, b: DVector<f64>, sigma: Operator, h: Operator) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d {
            return Err(Error::dims(format!("A must be square, got {}x{}", d, a.ncols())));
        }
        if b.len() != d {
            return Err(Error::dims(format!("B has length {}, expected {d}", b.len())));
        }
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(Error::dims(format!(
                "Sigma is {}x{}, expected {d}x{d}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        h.check_compose(d, "H")?;
        let c = StepCoefficients { a, b, sigma, h };
        if !c.sigma_is_psd(1e-10) {
            return Err(Error::InvalidParams("Sigma is not positive semidefinite".into()));
        }
        Ok(c)
    }

    /// Dense coefficients, convenient for small random systems.
    pub fn dense(a: DMatrix<f64>, b: DVector<f64>, sigma: SymMatrix, h: DMatrix<f64>) -> Result<Self> {
        Self::new(
            Operator::Dense(a),
            b,
            Operator::Dense(sigma.into_matrix()),
            Operator::Dense(h),
        )
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn sigma_sym(&self) -> SymMatrix {
        self.sigma.to_sym()
    }

    fn sigma_is_psd(&self, tol: f64) -> bool {
        match &self.sigma {
            Operator::ScaledIdentity { scale, .. } => *scale >= -tol,
            Operator::BlockDiagonal(blocks) => blocks
                .iter()
                .all(|b| SymMatrix::symmetrized(b.clone()).is_psd(tol * b.norm().max(1.0))),
            Operator::Dense(m) => SymMatrix::symmetrized(m.clone()).is_psd(tol * m.norm().max(1.0)),
        }
    }

    /// Symmetric square root of `Σ`, keeping its block structure.
    pub fn sigma_sqrt(&self) -> Operator {
        psd_sqrt(&self.sigma)
    }
}

/// Symmetric PSD square root of a symmetric operator (negative eigenvalues clipped).
pub fn psd_sqrt(op: &Operator) -> Operator {
    fn dense_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
        let e = SymMatrix::symmetrized(m.clone()).eigen();
        let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
        &e.eigenvectors * d * e.eigenvectors.transpose()
    }
    match op {
        Operator::ScaledIdentity { dim, scale } => Operator::ScaledIdentity {
            dim: *dim,
            scale: scale.max(0.0).sqrt(),
        },
        Operator::BlockDiagonal(blocks) => Operator::BlockDiagonal(
            blocks
                .iter()
                .map(|b| {
                    if b.nrows() == 1 {
                        DMatrix::from_element(1, 1, b[(0, 0)].max(0.0).sqrt())
                    } else {
                        dense_sqrt(b)
                    }
                })
                .collect(),
        ),
        Operator::Dense(m) => Operator::Dense(dense_sqrt(m)),
    }
}

/// Source of system coefficients indexed by step. Implementations must be
/// deterministic: the same step always yields identical coefficients.
pub trait CoefficientStream: Send + Sync {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn coefficients(&self, step: usize) -> StepCoefficients;
    fn is_time_homogeneous(&self) -> bool {
        false
    }
}

/// Time-homogeneous stream.
#[derive(Debug, Clone)]
pub struct ConstantStream(pub StepCoefficients);

impl CoefficientStream for ConstantStream {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }
    fn obs_dim(&self) -> usize {
        self.0.obs_dim()
    }
    fn coefficients(&self, _step: usize) -> StepCoefficients {
        self.0.clone()
    }
    fn is_time_homogeneous(&self) -> bool {
        true
    }
}

type Generator = dyn Fn(usize, &mut ChaCha8Rng) -> StepCoefficients + Send + Sync;

/// Stream built from a generator `(step, rng) -> coefficients`; the rng is a
/// substream keyed by `(seed, step)`.
#[derive(Clone)]
pub struct FnStream {
    d: usize,
    q: usize,
    seed: u64,
    generator: Arc<Generator>,
}

impl FnStream {
    pub fn new<F>(d: usize, q: usize, seed: u64, generator: F) -> Self
    where
        F: Fn(usize, &mut ChaCha8Rng) -> StepCoefficients + Send + Sync + 'static,
    {
        FnStream {
            d,
            q,
            seed,
            generator: Arc::new(generator),
        }
    }
}

impl CoefficientStream for FnStream {
    fn state_dim(&self) -> usize {
        self.d
    }
    fn obs_dim(&self) -> usize {
        self.q
    }
    fn coefficients(&self, step: usize) -> StepCoefficients {
        let mut rng = substream(self.seed, Domain::Instance, step as u64, 0);
        (self.generator)(step, &mut rng)
    }
}

/// The system with noises scaled by `ε`: `Σ → ε²Σ` and observation noise
/// `ε ζ`, expressed with unit observation noise as `H → H / ε`.
pub struct NoiseScaledStream<'a> {
    inner: &'a dyn CoefficientStream,
    eps: f64,
}

impl<'a> NoiseScaledStream<'a> {
    pub fn new(inner: &'a dyn CoefficientStream, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::InvalidParams(format!("noise scale eps={eps} must be > 0")));
        }
        Ok(NoiseScaledStream { inner, eps })
    }
}

impl CoefficientStream for NoiseScaledStream<'_> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }
    fn coefficients(&self, step: usize) -> StepCoefficients {
        let c = self.inner.coefficients(step);
        StepCoefficients {
            a: c.a,
            b: c.b,
            sigma: c.sigma.scaled(self.eps * self.eps),
            h: c.h.scaled(1.0 / self.eps),
        }
    }
    fn is_time_homogeneous(&self) -> bool {
        self.inner.is_time_homogeneous()
    }
}

/// Simulated truth `X_0..X_T` and observations `Y_1..Y_T`.
#[derive(Debug, Clone)]
pub struct TruthTrajectory {
    pub states: Vec<DVector<f64>>,
    /// `observations[n]` is `Y_{n+1}`.
    pub observations: Vec<DVector<f64>>,
    pub seed: u64,
}

/// Test hooks for [`simulate_truth_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct TruthOptions {
    pub suppress_observation_noise: bool,
}

pub fn simulate_truth(
    stream: &dyn CoefficientStream,
    x0: &DVector<f64>,
    steps: usize,
    seed: u64,
) -> Result<TruthTrajectory> {
    simulate_truth_with(stream, x0, steps, seed, TruthOptions::default())
}

pub fn simulate_truth_with(
    stream: &dyn CoefficientStream,
    x0: &DVector<f64>,
    steps: usize,
    seed: u64,
    opts: TruthOptions,
) -> Result<TruthTrajectory> {
    if steps == 0 {
        return Err(Error::InvalidParams("T must be >= 1".into()));
    }
    let d = stream.state_dim();
    if x0.len() != d {
        return Err(Error::dims(format!("x0 has length {}, expected {d}", x0.len())));
    }
    let mut states = Vec::with_capacity(steps + 1);
    let mut observations = Vec::with_capacity(steps);
    states.push(x0.clone());
    let mut sqrt_cache: Option<(Operator, Operator)> = None;
    for n in 0..steps {
        let c = stream.coefficients(n);
        // Σ's square root is reused while Σ is unchanged.
        let root = match &sqrt_cache {
            Some((sigma, root)) if *sigma == c.sigma => root.clone(),
            _ => {
                let root = c.sigma_sqrt();
                sqrt_cache = Some((c.sigma.clone(), root.clone()));
                root
            }
        };
        let mut rng = substream(seed, Domain::SystemNoise, n as u64, 0);
        let xi = root.apply(&standard_normal_vector(&mut rng, d));
        let next = c.a.apply(&states[n]) + &c.b + xi;
        let q = c.obs_dim();
        let mut y = c.h.apply(&next);
        if !opts.suppress_observation_noise && q > 0 {
            let mut rng = substream(seed, Domain::ObservationNoise, n as u64, 0);
            y += standard_normal_vector(&mut rng, q);
        }
        observations.push(y);
        states.push(next);
    }
    Ok(TruthTrajectory {
        states,
        observations,
        seed,
    })
}
