#![allow(dead_code)]

use std::time::Instant;

use enkf_lab::linalg::SymMatrix;
use nalgebra::DMatrix;

pub const SLACK: f64 = 1e-9;

pub fn sym(m: DMatrix<f64>) -> SymMatrix {
    let s = (&m + m.transpose()) * 0.5;
    SymMatrix::new(s).unwrap()
}

/// `f(M)` through the eigendecomposition.
pub fn spectral_fn(m: &SymMatrix, f: impl Fn(f64) -> f64) -> SymMatrix {
    let e = m.eigen();
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(f));
    sym(&e.eigenvectors * d * e.eigenvectors.transpose())
}

pub fn sqrt_psd(m: &SymMatrix) -> SymMatrix {
    spectral_fn(m, |v| v.max(0.0).sqrt())
}

pub fn inverse(m: &SymMatrix) -> SymMatrix {
    sym(m.as_matrix().clone().try_inverse().expect("invertible"))
}

pub fn mat(m: &SymMatrix) -> &DMatrix<f64> {
    m.as_matrix()
}

/// PSD matrix of uniformly random rank.
pub fn psd_any_rank(rng: &mut rand_chacha::ChaCha8Rng, d: usize, lo: f64, hi: f64) -> SymMatrix {
    use rand::Rng;
    let rank = rng.gen_range(0..=d);
    enkf_lab::sampling::random_psd(rng, d, rank, lo, hi)
}

/// Minimum over repetitions of the time per call, in seconds.
pub fn time_per_call(mut f: impl FnMut()) -> f64 {
    let reps = 20;
    (0..9)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..reps {
                f();
            }
            t.elapsed().as_secs_f64() / reps as f64
        })
        .fold(f64::INFINITY, f64::min)
}

/// Per-step cost is linear in `d` within a factor 1.5.
pub fn linear_scaling(times: &[(f64, f64)]) -> bool {
    let n = times.len() as f64;
    let mx = times.iter().map(|t| t.0).sum::<f64>() / n;
    let my = times.iter().map(|t| t.1).sum::<f64>() / n;
    let b = times.iter().map(|t| (t.0 - mx) * (t.1 - my)).sum::<f64>()
        / times.iter().map(|t| (t.0 - mx).powi(2)).sum::<f64>();
    let a = my - b * mx;
    let fit_ok = times.iter().all(|&(x, y)| {
        let f = a + b * x;
        f > 0.0 && y <= 1.5 * f && y >= f / 1.5
    });
    let (d0, t0) = times[0];
    let (d1, t1) = times[times.len() - 1];
    fit_ok && t1 / t0 <= 1.5 * d1 / d0
}
