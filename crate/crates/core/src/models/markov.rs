//! Finite-state Markov chain driving per-mode multipliers of the dynamics.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regime-jump specification.
///
/// `multipliers[s][i]` scales the dynamics block of wavenumber `modes[i]`
/// while the chain is in state `s`; modes outside `modes` keep multiplier 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpSpec {
    /// The instability set `I` of wavenumbers.
    pub modes: Vec<usize>,
    pub multipliers: Vec<Vec<f64>>,
    /// Row-stochastic transition matrix.
    pub transition: Vec<Vec<f64>>,
    #[serde(default)]
    pub initial_state: usize,
    /// Seed of the chain path, independent of the noise seeds.
    #[serde(default)]
    pub seed: u64,
}

impl JumpSpec {
    pub fn num_states(&self) -> usize {
        self.transition.len()
    }

    pub fn validate(&self, max_mode: usize) -> Result<()> {
        let n = self.transition.len();
        if n == 0 {
            return Err(Error::InvalidChain("transition matrix is empty".into()));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidChain(format!(
                    "transition row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::InvalidChain(format!("transition row {i} has a negative entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidChain(format!("transition row {i} sums to {sum}, not 1")));
            }
        }
        if self.multipliers.len() != n {
            return Err(Error::InvalidChain(format!(
                "{} multiplier rows for {n} chain states",
                self.multipliers.len()
            )));
        }
        for (s, m) in self.multipliers.iter().enumerate() {
            if m.len() != self.modes.len() {
                return Err(Error::InvalidChain(format!(
                    "state {s} has {} multipliers for {} modes",
                    m.len(),
                    self.modes.len()
                )));
            }
        }
        if self.initial_state >= n {
            return Err(Error::InvalidChain(format!(
                "initial_state {} out of range for {n} states",
                self.initial_state
            )));
        }
        if let Some(k) = self.modes.iter().find(|&&k| k > max_mode) {
            return Err(Error::InvalidChain(format!("mode {k} exceeds truncation J={max_mode}")));
        }
        Ok(())
    }

    /// Multipliers for wavenumbers `0..=j` while in `state`.
    pub fn mode_multipliers(&self, state: usize, j: usize) -> Vec<f64> {
        let mut out = vec![1.0; j + 1];
        for (i, &k) in self.modes.iter().enumerate() {
            if k <= j {
                out[k] = self.multipliers[state][i];
            }
        }
        out
    }
}

/// Advances the chain one step from `state`. Returns the new state and the
/// multipliers of the instability modes in that state.
pub fn markov_jump_step(spec: &JumpSpec, state: usize, rng: &mut ChaCha8Rng) -> Result<(usize, Vec<f64>)> {
    let max_mode = spec.modes.iter().copied().max().unwrap_or(0);
    spec.validate(max_mode)?;
    if state >= spec.num_states() {
        return Err(Error::InvalidChain(format!("state {state} out of range")));
    }
    let u: f64 = rng.gen();
    let row = &spec.transition[state];
    let mut acc = 0.0;
    let mut next = row.len() - 1;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            next = j;
            break;
        }
    }
    Ok((next, spec.multipliers[next].clone()))
}

/// Stationary distribution `π` with `π P = π`, `Σπ = 1`.
pub fn stationary_distribution(transition: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = transition.len();
    if n == 0 || transition.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidChain(
            "transition matrix must be square and nonempty".into(),
        ));
    }
    let p = DMatrix::from_fn(n, n, |i, j| transition[i][j]);
    let mut m = p.transpose() - DMatrix::identity(n, n);
    for j in 0..n {
        m[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let pi = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidChain("chain has no unique stationary distribution".into()))?;
    Ok(pi.iter().copied().collect())
}
