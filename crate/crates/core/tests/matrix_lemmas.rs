//! Matrix inequalities behind the filter analysis, checked on random
//! instances with a `1e-9·I` Loewner slack.

mod common;

use common::*;
use enkf_lab::linalg::{condition_number, kalman_gain, kalman_update_operator, loewner_ratio, SymMatrix};
use enkf_lab::rng::{substream, Domain};
use enkf_lab::sampling::{random_matrix, random_orthonormal, random_pd, random_psd, random_symmetric};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn cases() -> ProptestConfig {
    ProptestConfig {
        cases: 1000,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(cases())]

    #[test]
    fn update_operator_is_concave(seed in any::<u64>(), d in 1usize..=8, q in 0usize..=4) {
        let mut rng = substream(seed, Domain::Instance, 0, 0);
        let x = random_pd(&mut rng, d, 0.05, 2.0);
        let rank = rng.gen_range(0..=d);
        let a = random_psd(&mut rng, d, rank, 0.0, 2.0);
        let h = random_matrix(&mut rng, q, d);
        let lhs = kalman_update_operator(&x, &h).unwrap().add(&kalman_update_operator(&x.add(&a), &h).unwrap());
        let rhs = kalman_update_operator(&x.add(&a.scale(0.5)), &h).unwrap().scale(2.0);
        prop_assert!(lhs.loewner_le(&rhs, SLACK));
    }

    #[test]
    fn update_operator_is_monotone(seed in any::<u64>(), d in 1usize..=8, q in 0usize..=4) {
        let mut rng = substream(seed, Domain::Instance, 1, 0);
        let x = random_psd(&mut rng, d, d, 0.0, 2.0);
        let y = x.add(&psd_any_rank(&mut rng, d, 0.0, 2.0));
        let h = random_matrix(&mut rng, q, d);
        let kx = kalman_update_operator(&x, &h).unwrap();
        let ky = kalman_update_operator(&y, &h).unwrap();
        prop_assert!(kx.loewner_le(&ky, SLACK));
        // PSD in, PSD out.
        prop_assert!(kx.is_psd(SLACK));
    }

    #[test]
    fn update_operator_has_joseph_form(seed in any::<u64>(), d in 1usize..=8, q in 0usize..=4) {
        let mut rng = substream(seed, Domain::Instance, 2, 0);
        let c = psd_any_rank(&mut rng, d, 0.0, 3.0);
        let h = random_matrix(&mut rng, q, d);
        let g = kalman_gain(&c, &h).unwrap();
        let m = DMatrix::identity(d, d) - &g * &h;
        let joseph = sym(&m * mat(&c) * m.transpose() + &g * g.transpose());
        let k = kalman_update_operator(&c, &h).unwrap();
        prop_assert!(k.sub(&joseph).spectral_norm() <= 1e-9 * (1.0 + c.spectral_norm()));
        // (I − GH)(I + C HᵀH) = I
        let prod = &m * (DMatrix::identity(d, d) + mat(&c) * h.transpose() * &h);
        prop_assert!((prod - DMatrix::identity(d, d)).amax() <= 1e-9 * (1.0 + c.spectral_norm()));
    }

    #[test]
    fn inverse_bound_transfers(seed in any::<u64>(), d in 1usize..=8, m in 1usize..=6) {
        let mut rng = substream(seed, Domain::Instance, 3, 0);
        let b = random_matrix(&mut rng, d, m);
        let c = random_pd(&mut rng, m, 0.1, 2.0);
        let dd = psd_any_rank(&mut rng, d, 0.0, 2.0).add_identity(0.05);
        let total = c.congruence(&b).add(&dd);
        // A = M^{-1/2} T M^{-1/2} with 0 ⪯ T ⪯ I, so A ⪯ M⁻¹.
        let t = psd_any_rank(&mut rng, d, 0.0, 1.0);
        let m_isqrt = spectral_fn(&total, |v| 1.0 / v.sqrt());
        let a = t.congruence(mat(&m_isqrt));
        prop_assert!(a.loewner_le(&inverse(&total), SLACK));

        let lhs = a.congruence(&b.transpose());
        prop_assert!(lhs.loewner_le(&inverse(&c), SLACK));
        let a_half = sqrt_psd(&a);
        prop_assert!(dd.congruence(mat(&a_half)).loewner_le(&SymMatrix::identity(d), SLACK));
    }

    #[test]
    fn commuting_congruence_by_contractions_and_expansions(seed in any::<u64>(), d in 1usize..=8) {
        let mut rng = substream(seed, Domain::Instance, 4, 0);
        let q = random_orthonormal(&mut rng, d, d);
        let diag = |rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(lo..=hi)).collect();
            SymMatrix::from_diagonal(&v).congruence(&q)
        };
        let b = diag(&mut rng, 0.0, 2.0);
        let big = diag(&mut rng, 1.0, 3.0);
        prop_assert!(b.loewner_le(&b.congruence(mat(&big)), SLACK));
        let small = diag(&mut rng, 0.0, 1.0);
        prop_assert!(b.congruence(mat(&small)).loewner_le(&b, SLACK));
    }

    #[test]
    fn contraction_between_symmetric_factors(seed in any::<u64>(), d in 1usize..=8) {
        let mut rng = substream(seed, Domain::Instance, 8, 0);
        let small = random_psd(&mut rng, d, d, 0.0, 1.0);
        let c = random_symmetric(&mut rng, d).scale(0.5);
        let c2 = sym(mat(&c) * mat(&c));
        prop_assert!(small.congruence(mat(&c)).loewner_le(&c2, SLACK));
    }

    #[test]
    fn spectral_radius_of_product_is_a_loewner_ratio(seed in any::<u64>(), d in 1usize..=8) {
        let mut rng = substream(seed, Domain::Instance, 5, 0);
        let a = random_pd(&mut rng, d, 0.1, 3.0);
        let b = psd_any_rank(&mut rng, d, 0.0, 3.0);
        // AB is similar to B^{1/2} A B^{1/2}, and ‖AB‖² = λ_max(B A² B).
        let radius = a.congruence(mat(&sqrt_psd(&b))).max_eigenvalue();
        let a2 = sym(mat(&a) * mat(&a));
        let norm = a2.congruence(mat(&b)).max_eigenvalue().max(0.0).sqrt();
        let a_half = sqrt_psd(&a);
        let conj = b.congruence(mat(&a_half)).spectral_norm();
        let ratio = loewner_ratio(&b, &inverse(&a)).unwrap();
        let scale = 1.0 + norm;
        prop_assert!((radius - conj).abs() <= 1e-9 * scale);
        prop_assert!((radius - ratio).abs() <= 1e-9 * scale);
        prop_assert!(norm >= ratio * (1.0 - 1e-12));
    }

    #[test]
    fn loewner_ratio_is_the_tightest_bound(seed in any::<u64>(), d in 1usize..=8) {
        let mut rng = substream(seed, Domain::Instance, 6, 0);
        let a = random_pd(&mut rng, d, 0.1, 3.0);
        let b = psd_any_rank(&mut rng, d, 0.0, 3.0);
        let t = loewner_ratio(&b, &a).unwrap();
        prop_assert!(b.loewner_le(&a.scale(t * (1.0 + 1e-9)), SLACK));
        if t > 1e-6 {
            prop_assert!(!b.loewner_le(&a.scale(t * (1.0 - 1e-6)), 0.0));
        }
        // ratio ≤ 1 exactly when B ⪯ A up to the slack.
        let s = rng.gen_range(0.5..1.5);
        let bs = b.scale(s / t.max(1e-300));
        let r = loewner_ratio(&bs, &a).unwrap();
        prop_assert_eq!(r <= 1.0 + 1e-9, bs.loewner_le(&a.scale(1.0 + 1e-9), SLACK));
    }

    #[test]
    fn compression_does_not_worsen_conditioning(seed in any::<u64>(), d in 2usize..=8) {
        let mut rng = substream(seed, Domain::Instance, 7, 0);
        let p = rng.gen_range(1..=d);
        let a = random_pd(&mut rng, d, 0.01, 5.0);
        let theta = random_orthonormal(&mut rng, d, p).transpose() * rng.gen_range(0.1..10.0);
        let c = condition_number(&a.congruence(&theta)).unwrap();
        prop_assert!(c <= condition_number(&a).unwrap() * (1.0 + 1e-9));
    }
}

/// With `Θ` of rank `p` but rows that are not orthonormal, the compressed
/// matrix can be worse conditioned than `A`.
#[test]
fn compression_bound_needs_orthonormal_rows() {
    let a = SymMatrix::identity(2);
    let theta = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 10.0]);
    assert_eq!(condition_number(&a).unwrap(), 1.0);
    assert!((condition_number(&a.congruence(&theta)).unwrap() - 100.0).abs() < 1e-9);
}

/// `A ⪰ I` (or `A ⪯ I`) alone does not order `ABA` against `B` when the two
/// do not commute.
#[test]
fn congruence_bound_needs_commuting_factors() {
    let b = sym(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]));
    let big = SymMatrix::from_diagonal(&[1.0, 2.0]);
    assert!(!b.loewner_le(&b.congruence(mat(&big)), 1e-3));
    let small = SymMatrix::from_diagonal(&[1.0, 0.0]);
    assert!(!b.congruence(mat(&small)).loewner_le(&b, 1e-3));
}

/// The operator norm of `AB` can exceed `‖A^{1/2} B A^{1/2}‖`.
#[test]
fn product_norm_exceeds_the_loewner_ratio() {
    let a = SymMatrix::from_diagonal(&[1.0, 4.0]);
    let b = sym(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]));
    let norm = sym(mat(&a) * mat(&a)).congruence(mat(&b)).max_eigenvalue().sqrt();
    let ratio = loewner_ratio(&b, &inverse(&a)).unwrap();
    assert!((ratio - 5.0).abs() < 1e-12);
    assert!(norm > ratio + 0.5, "{norm} vs {ratio}");
}
