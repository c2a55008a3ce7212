//! Counter-keyed random substreams.
//!
//! Every random draw in the crate comes from a ChaCha stream whose key is
//! derived from `(seed, domain, step, member)`. Draws for one ensemble member
//! at one step never depend on how many other members exist or on the order
//! in which they are evaluated.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Independent purposes a random draw can serve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Domain {
    SystemNoise = 1,
    ObservationNoise = 2,
    InitialEnsemble = 3,
    ForecastNoise = 4,
    MarkovJump = 5,
    Concentration = 6,
    Instance = 7,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Returns the generator keyed by `(seed, domain, step, member)`.
pub fn substream(seed: u64, domain: Domain, step: u64, member: u64) -> ChaCha8Rng {
    let mut state = seed;
    let mut mix = splitmix64(&mut state);
    for word in [domain as u64, step, member] {
        state ^= word.wrapping_mul(0xD6E8_FEB8_6659_FD93).rotate_left(17) ^ mix;
        mix = splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

pub fn standard_normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

pub fn standard_normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    // Column-major fill so that column j only depends on the draws that precede it.
    let mut m = DMatrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = StandardNormal.sample(rng);
        }
    }
    m
}
