//! Acceptance criteria 1–11. Prints one line per criterion and exits nonzero
//! when a criterion outside `KNOWN_RED` fails.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use common::{linear_scaling, spectral_fn, sqrt_psd, sym, time_per_call};
use enkf_lab::config::{load_config, ExperimentConfig};
use enkf_lab::diagnostics::{
    run_accuracy_experiment, run_concentration_experiment, run_filter_experiment, run_stability_experiment,
    turbulence_climatology, turbulence_reference, ConcentrationConfig, FilterSetup,
};
use enkf_lab::effective_dim::verify_dim;
use enkf_lab::enkf::{enkf_step, enkf_step_with, EnkfConfig, Ensemble, InstabilityCache, StepNoise};
use enkf_lab::kalman_ref::{kalman_step, propagate, KalmanState};
use enkf_lab::linalg::{
    gain_apply_woodbury, kalman_gain, kalman_update_operator, loewner_ratio, KalmanGainContext, Operator, SymMatrix,
};
use enkf_lab::models::{
    build_turbulence, simulate_truth, CoefficientStream, ConstantStream, StepCoefficients, TurbulenceParams,
};
use enkf_lab::rng::{standard_normal_vector, substream, Domain};
use enkf_lab::sampling::{random_matrix, random_pd, random_psd};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Criteria whose literal statements do not hold; see the README.
const KNOWN_RED: [u32; 4] = [2, 3, 4, 6];

type Criterion = (u32, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    load_config(&path).unwrap()
}

/// The observed model reduced to `j` modes, with `p` from the dimension check.
fn reduced(j: usize, k: usize) -> (TurbulenceParams, EnkfConfig) {
    let params = TurbulenceParams {
        j,
        ..TurbulenceParams::kolmogorov_observed()
    };
    let p = verify_dim(&params).unwrap().eigen_effective.clamp(1, params.dim());
    let cfg = EnkfConfig {
        k,
        p,
        r: params.r,
        rho: params.rho,
        tau: params.tau,
    };
    (params, cfg)
}

fn setup_for(params: &TurbulenceParams, stream: &enkf_lab::models::TurbulenceStream, steps: usize) -> FilterSetup {
    FilterSetup {
        steps,
        initial_mean: DVector::zeros(params.dim()),
        initial_cov: turbulence_climatology(params),
        reference: turbulence_reference(stream, steps).unwrap(),
    }
}

fn seeds(n: u64) -> Vec<u64> {
    (1..=n).collect()
}

fn c1() -> Outcome {
    let cfg = config("kolmogorov_unfiltered.json");
    let t = Instant::now();
    let rep = cfg.dim_report().unwrap();
    let secs = t.elapsed().as_secs_f64();
    outcome(
        rep.p_effective == 15 && rep.p_effective_pm == 30 && secs < 1.0,
        format!(
            "p = {} ({} counting ±k), expected 15 (30); {secs:.3} s",
            rep.p_effective, rep.p_effective_pm
        ),
    )
}

fn c2() -> Outcome {
    let cfg = config("kolmogorov_observed.json");
    let t = Instant::now();
    let rep = cfg.dim_report().unwrap();
    let secs = t.elapsed().as_secs_f64();
    outcome(
        rep.p_effective == 6 && secs < 1.0,
        format!(
            "p = {} (eigenvalue count {}, failing modes {:?}), expected 6; {secs:.3} s",
            rep.p_effective, rep.eigen_effective, rep.failing_modes
        ),
    )
}

fn c3() -> Outcome {
    let d = 4;
    let mut rng = substream(21, Domain::Instance, 0, 0);
    let a = random_matrix(&mut rng, d, d) * (0.9 / (d as f64).sqrt());
    let sigma = random_pd(&mut rng, d, 0.1, 1.0);
    let h = random_matrix(&mut rng, 2, d);
    let coeffs = StepCoefficients::dense(a, DVector::zeros(d), sigma, h).unwrap();
    let stream = ConstantStream(coeffs.clone());
    let cfg = EnkfConfig {
        k: 1000,
        p: d,
        r: 1.0 + 1e-6,
        rho: 1e-6,
        tau: 1.0,
    };
    let t = Instant::now();
    let mut errors = Vec::new();
    for seed in 1..=5u64 {
        let x0 = DVector::zeros(d);
        let c0 = SymMatrix::identity(d);
        let truth = simulate_truth(&stream, &x0, 30, seed).unwrap();
        let mut ens = Ensemble::sample(&x0, &c0, cfg.k, seed).unwrap();
        let mut kf = KalmanState { mean: x0, cov: c0 };
        for n in 0..30 {
            let y = &truth.observations[n];
            let (next, rec) = enkf_step(&ens, &coeffs, y, &cfg, StepNoise { seed, step: n }).unwrap();
            let forecast = propagate(&coeffs.a, &kf.cov).add(&coeffs.sigma_sym());
            let fc = SymMatrix::from_factor(&(&rec.forecast_spread / ((cfg.k - 1) as f64).sqrt()));
            errors.push(fc.sub(&forecast).spectral_norm() / forecast.spectral_norm());
            kf = kalman_step(&kf, &coeffs, y).unwrap();
            ens = next;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    errors.sort_by(f64::total_cmp);
    let worst = errors[errors.len() - 1];
    let above = errors.iter().filter(|&&e| e > 0.15).count();
    outcome(
        worst <= 0.15 && secs < 10.0,
        format!(
            "relative forecast error over 5 seeds × 30 steps: median {:.4}, worst {worst:.4} (≤ 0.15), \
             {above}/{} above 0.15; {secs:.2} s",
            errors[errors.len() / 2],
            errors.len()
        ),
    )
}

#[derive(Default)]
struct ExactnessTally {
    steps: usize,
    chi_above_one: usize,
    worst_exact: f64,
    upper_violations: usize,
    lower_violations: usize,
    lower_violations_at_chi_one: usize,
    corrected_lower_violations: usize,
}

fn tally_run(stream: &dyn CoefficientStream, cfg: &EnkfConfig, steps: usize, seed: u64, t: &mut ExactnessTally) {
    let d = stream.state_dim();
    let x0 = DVector::zeros(d);
    let truth = simulate_truth(stream, &x0, steps, seed).unwrap();
    let mut ens = Ensemble::sample(&x0, &SymMatrix::identity(d), cfg.k, seed).unwrap();
    let mut cache = InstabilityCache::default();
    for n in 0..steps {
        let coeffs = stream.coefficients(n);
        let plus = cache.get(&coeffs, &cfg.augmented()).clone();
        let (next, rec) = enkf_step_with(
            &ens,
            &coeffs,
            &plus,
            &truth.observations[n],
            cfg,
            StepNoise { seed, step: n },
        )
        .unwrap();
        let chat = SymMatrix::from_factor(&(&rec.forecast_spread / ((cfg.k - 1) as f64).sqrt()))
            .add_identity(cfg.additive_level());
        let post = kalman_update_operator(&chat, &coeffs.h.to_dense()).unwrap();
        let e = post.eigen();
        let mut target = DMatrix::zeros(d, d);
        for i in 0..cfg.p {
            let v = e.eigenvectors.column(i);
            target += v * v.transpose() * (e.eigenvalues[i] - cfg.rho).max(0.0);
        }
        let c = next.covariance();
        let scale = 1.0 + post.spectral_norm();
        t.worst_exact = t.worst_exact.max(c.sub(&sym(target)).spectral_norm() / scale);
        let slack = 1e-9 * scale;
        let c_rho = c.add_identity(cfg.rho);
        t.upper_violations += !c_rho.loewner_le(&post.add_identity(cfg.rho), slack) as usize;
        let lower = post.loewner_le(&c_rho, slack);
        t.lower_violations += !lower as usize;
        t.lower_violations_at_chi_one += (!lower && rec.chi == 1.0) as usize;
        t.corrected_lower_violations += !post.loewner_le(&c.add_identity(cfg.rho * rec.chi), slack) as usize;
        t.chi_above_one += (rec.chi > 1.0) as usize;
        t.steps += 1;
        ens = next;
    }
}

fn c4() -> Outcome {
    let t0 = Instant::now();
    let mut t = ExactnessTally::default();
    for (j, k, p) in [(10, 40, None), (50, 40, None), (50, 40, Some(6))] {
        let (params, mut cfg) = reduced(j, k);
        if let Some(p) = p {
            cfg.p = p;
        }
        let stream = build_turbulence(&params).unwrap();
        for seed in 1..=2 {
            tally_run(&stream, &cfg, 60, seed, &mut t);
        }
    }
    let unfiltered = TurbulenceParams {
        j: 10,
        ..TurbulenceParams::kolmogorov()
    };
    let p = verify_dim(&unfiltered)
        .unwrap()
        .eigen_effective
        .clamp(1, unfiltered.dim());
    let cfg = EnkfConfig {
        k: 30,
        p,
        r: unfiltered.r,
        rho: unfiltered.rho,
        tau: unfiltered.tau,
    };
    tally_run(&build_turbulence(&unfiltered).unwrap(), &cfg, 60, 1, &mut t);
    let d = 9;
    let mut rng = substream(5, Domain::Instance, 0, 0);
    let a = random_matrix(&mut rng, d, d) * (1.05 / (d as f64).sqrt());
    let sigma = random_pd(&mut rng, d, 0.01, 0.3);
    let h = random_matrix(&mut rng, 3, d);
    let stream = ConstantStream(StepCoefficients::dense(a, DVector::zeros(d), sigma, h).unwrap());
    let cfg = EnkfConfig {
        k: 7,
        p: 4,
        r: 1.1,
        rho: 0.05,
        tau: 0.7,
    };
    tally_run(&stream, &cfg, 60, 11, &mut t);
    let secs = t0.elapsed().as_secs_f64();
    let pass = t.worst_exact <= 1e-8 && t.upper_violations == 0 && t.lower_violations == 0 && secs < 30.0;
    outcome(
        pass,
        format!(
            "{} steps: worst ‖C − P(𝒦−ρI)P‖/(1+‖𝒦‖) = {:.2e}; upper sandwich violations {}; \
             lower sandwich 𝒦 ⪯ C+ρI violated at {} steps ({} of them at χ = 1; \
             {} steps had χ > 1); 𝒦 ⪯ C+χρI violated at {}; {secs:.2} s",
            t.steps,
            t.worst_exact,
            t.upper_violations,
            t.lower_violations,
            t.lower_violations_at_chi_one,
            t.chi_above_one,
            t.corrected_lower_violations
        ),
    )
}

fn c5() -> Outcome {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for inst in 0..200u64 {
        let mut rng = substream(inst, Domain::Instance, 1, 0);
        let d = rng.gen_range(2..=500);
        let k = rng.gen_range(2..=30);
        let level = 10f64.powf(rng.gen_range(-3.0..1.0));
        let q = rng.gen_range(1..=d);
        let obs = match inst % 3 {
            0 => Operator::ScaledIdentity {
                dim: d,
                scale: rng.gen_range(0.1..3.0),
            },
            1 => Operator::diagonal(&(0..d).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>()),
            _ => Operator::Dense(random_matrix(&mut rng, q, d)),
        };
        let mut spread = random_matrix(&mut rng, d, k);
        let mean = spread.column_mean();
        for mut c in spread.column_iter_mut() {
            c -= &mean;
        }
        let ctx = KalmanGainContext::new(&spread, level, &obs).unwrap();
        let chat = SymMatrix::from_factor(&(&spread / ((k - 1) as f64).sqrt())).add_identity(level);
        let h = obs.to_dense();
        let y = standard_normal_vector(&mut rng, h.nrows());
        let fast = gain_apply_woodbury(&ctx, &y).unwrap();
        let dense = kalman_gain(&chat, &h).unwrap() * &y;
        worst = worst.max((&fast - &dense).norm() / dense.norm().max(f64::MIN_POSITIVE));
    }
    let gain_secs = t0.elapsed().as_secs_f64();

    let mut attempts = Vec::new();
    let mut linear = false;
    for attempt in 0..3u64 {
        let times: Vec<(f64, f64)> = [200usize, 400, 800]
            .iter()
            .map(|&d| {
                let (coeffs, cfg) = step_model(d);
                let mut rng = substream(attempt, Domain::Instance, d as u64, 1);
                let ens = Ensemble::from_members(&random_matrix(&mut rng, d, cfg.k)).unwrap();
                let y = standard_normal_vector(&mut rng, d);
                let plus = InstabilityCache::default().get(&coeffs, &cfg.augmented()).clone();
                let secs = time_per_call(|| {
                    let noise = StepNoise { seed: 1, step: 0 };
                    std::hint::black_box(enkf_step_with(&ens, &coeffs, &plus, &y, &cfg, noise).unwrap());
                });
                (d as f64, secs)
            })
            .collect();
        linear = linear_scaling(&times);
        attempts.push(times);
        if linear {
            break;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let last = attempts.last().unwrap();
    let timing = last
        .iter()
        .map(|(d, t)| format!("d={d}: {:.3} ms", t * 1e3))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        worst <= 1e-8 && linear && secs < 60.0,
        format!(
            "worst relative gain gap {worst:.2e} over 200 instances ({gain_secs:.2} s); step cost {timing} \
             ({} attempt(s)); {secs:.2} s",
            attempts.len()
        ),
    )
}

/// A damped rotation model of dimension `d` observed through a scaled identity.
fn step_model(d: usize) -> (StepCoefficients, EnkfConfig) {
    let blocks = (0..d / 2)
        .map(|i| {
            let (s, c) = (0.1 * i as f64).sin_cos();
            DMatrix::from_row_slice(2, 2, &[c, -s, s, c]) * 0.95
        })
        .collect();
    let coeffs = StepCoefficients::new(
        Operator::BlockDiagonal(blocks),
        DVector::zeros(d),
        Operator::ScaledIdentity { dim: d, scale: 0.01 },
        Operator::ScaledIdentity { dim: d, scale: 0.5 },
    )
    .unwrap();
    let cfg = EnkfConfig {
        k: 20,
        p: 10,
        r: 1.1,
        rho: 0.04,
        tau: 1.0,
    };
    (coeffs, cfg)
}

struct StatementCount {
    name: &'static str,
    instances: usize,
    violations: usize,
}

fn statement(name: &'static str, instances: usize, mut holds: impl FnMut(&mut ChaCha8Rng) -> bool) -> StatementCount {
    let tag = name
        .bytes()
        .fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    let violations = (0..instances as u64)
        .filter(|&i| !holds(&mut substream(tag, Domain::Instance, i, 2)))
        .count();
    StatementCount {
        name,
        instances,
        violations,
    }
}

fn slack(m: &SymMatrix) -> f64 {
    1e-9 * (1.0 + m.spectral_norm())
}

/// PSD with eigenvalues in `[0, 1]`.
fn contraction(rng: &mut ChaCha8Rng, d: usize) -> SymMatrix {
    let rank = rng.gen_range(1..=d);
    random_psd(rng, d, rank, 0.0, 1.0)
}

fn any_psd(rng: &mut ChaCha8Rng, d: usize) -> SymMatrix {
    let rank = rng.gen_range(0..=d);
    random_psd(rng, d, rank, 0.0, 3.0)
}

fn c6() -> Outcome {
    let t0 = Instant::now();
    let n = 1000;
    let dims = |rng: &mut ChaCha8Rng| (rng.gen_range(2..=8), rng.gen_range(1..=4));
    let results = [
        statement("Joseph form", n, |rng| {
            let (d, q) = dims(rng);
            let c = any_psd(rng, d);
            let h = random_matrix(rng, q, d);
            let g = kalman_gain(&c, &h).unwrap();
            let ih = DMatrix::identity(d, d) - &g * &h;
            let joseph = sym(&ih * c.as_matrix() * ih.transpose() + &g * g.transpose());
            let k = kalman_update_operator(&c, &h).unwrap();
            k.sub(&joseph).spectral_norm() <= slack(&k)
        }),
        statement("update concavity", n, |rng| {
            let (d, q) = dims(rng);
            let (x, y) = (any_psd(rng, d), any_psd(rng, d));
            let h = random_matrix(rng, q, d);
            let k = |c: &SymMatrix| kalman_update_operator(c, &h).unwrap();
            let mid = k(&x.add(&y).scale(0.5)).scale(2.0);
            k(&x).add(&k(&y)).loewner_le(&mid, slack(&mid))
        }),
        statement("update monotonicity", n, |rng| {
            let (d, q) = dims(rng);
            let (x, a) = (any_psd(rng, d), any_psd(rng, d));
            let h = random_matrix(rng, q, d);
            let hi = kalman_update_operator(&x.add(&a), &h).unwrap();
            kalman_update_operator(&x, &h).unwrap().loewner_le(&hi, slack(&hi))
        }),
        statement("inverse bound transfer", n, |rng| {
            let (d, m) = dims(rng);
            let b = random_matrix(rng, d, m);
            let c = random_pd(rng, m, 0.1, 3.0);
            let dd = random_pd(rng, d, 0.05, 2.0);
            let outer = c.congruence(&b).add(&dd);
            let inv_sqrt = spectral_fn(&outer, |v| 1.0 / v.sqrt());
            let a = contraction(rng, d).congruence(inv_sqrt.as_matrix());
            let c_inv = spectral_fn(&c, |v| 1.0 / v);
            let first = a.congruence(&b.transpose()).loewner_le(&c_inv, slack(&c_inv));
            let second = dd
                .congruence(sqrt_psd(&a).as_matrix())
                .loewner_le(&SymMatrix::identity(d), 1e-9 * 2.0);
            first && second
        }),
        statement("A ⪰ I ⇒ ABA ⪰ B", n, |rng| {
            let d = rng.gen_range(2..=8);
            let a = any_psd(rng, d).add_identity(1.0);
            let b = any_psd(rng, d);
            let aba = b.congruence(a.as_matrix());
            b.loewner_le(&aba, slack(&aba))
        }),
        statement("A ⪯ I ⇒ ABA ⪯ B", n, |rng| {
            let d = rng.gen_range(2..=8);
            let a = contraction(rng, d);
            let b = any_psd(rng, d);
            b.congruence(a.as_matrix()).loewner_le(&b, slack(&b))
        }),
        statement("A ⪯ I ⇒ CAC ⪯ C²", n, |rng| {
            let d = rng.gen_range(2..=8);
            let a = contraction(rng, d);
            let c = sym(random_matrix(rng, d, d));
            let c2 = sym(c.as_matrix() * c.as_matrix());
            a.congruence(c.as_matrix()).loewner_le(&c2, slack(&c2))
        }),
        statement("‖AB‖ = ‖A½BA½‖ = inf{λ: B ⪯ λA⁻¹}", n, |rng| {
            let d = rng.gen_range(2..=8);
            let a = random_pd(rng, d, 0.1, 4.0);
            let b = any_psd(rng, d);
            // ‖AB‖² is the top eigenvalue of B A² B.
            let ab = sym(b.as_matrix() * a.as_matrix() * a.as_matrix() * b.as_matrix())
                .max_eigenvalue()
                .max(0.0)
                .sqrt();
            let conj = b.congruence(sqrt_psd(&a).as_matrix()).spectral_norm();
            let ratio = loewner_ratio(&b, &spectral_fn(&a, |v| 1.0 / v)).unwrap();
            let tol = 1e-9 * (1.0 + ab.max(conj));
            (ab - conj).abs() <= tol && (conj - ratio).abs() <= tol
        }),
        statement("cond(ΘAΘᵀ) ≤ cond(A)", n, |rng| {
            let d = rng.gen_range(2..=8);
            let p = rng.gen_range(1..=d);
            let a = random_pd(rng, d, 0.1, 4.0);
            let theta = random_matrix(rng, p, d);
            let cond = |m: &SymMatrix| m.max_eigenvalue() / m.min_eigenvalue();
            cond(&a.congruence(&theta)) <= cond(&a) * (1.0 + 1e-9)
        }),
    ];
    let secs = t0.elapsed().as_secs_f64();
    let failing: Vec<String> = results
        .iter()
        .filter(|r| r.violations > 0)
        .map(|r| format!("{}: {}/{}", r.name, r.violations, r.instances))
        .collect();
    let pass = failing.is_empty() && secs < 60.0;
    let detail = if failing.is_empty() {
        format!("{} statements × {n} instances hold; {secs:.2} s", results.len())
    } else {
        format!(
            "{} statements × {n} instances; violated: {}; the rest hold; {secs:.2} s",
            results.len(),
            failing.join("; ")
        )
    };
    outcome(pass, detail)
}

fn c7() -> Outcome {
    let cfg = ConcentrationConfig::new(200, 5, vec![10, 20, 40, 80]);
    let t = Instant::now();
    let (rep, _) = run_concentration_experiment(&cfg, 1).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let monotone = rep.monotone_fraction.iter().all(|&(_, f)| f >= 0.8);
    let tails = !rep.fits.is_empty() && rep.fits.iter().all(|f| f.slope < 0.0 && f.r_squared > 0.8);
    let fracs: Vec<String> = rep
        .monotone_fraction
        .iter()
        .map(|(c, f)| format!("cond {c}: {f:.2}"))
        .collect();
    let fits: Vec<String> = rep
        .fits
        .iter()
        .map(|f| {
            format!(
                "cond {} K={}: slope {:.3}, R² {:.3} ({} pts)",
                f.condition, f.k, f.slope, f.r_squared, f.points
            )
        })
        .collect();
    outcome(
        monotone && tails && secs < 300.0,
        format!(
            "non-increasing pairs [{}]; tail fits [{}] over the upper tail of t ∈ [−7.5, 8]; {secs:.1} s",
            fracs.join(", "),
            fits.join("; ")
        ),
    )
}

fn c8() -> Outcome {
    let (params, cfg) = reduced(10, 40);
    let stream = build_turbulence(&params).unwrap();
    let setup = setup_for(&params, &stream, 300);
    let t = Instant::now();
    let runs = run_stability_experiment(&stream, &cfg, &setup, &[10.0], &seeds(50)).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let identical = runs.iter().all(|r| r.spreads_identical);
    let negative = runs.iter().filter(|r| r.slope.is_some_and(|s| s < 0.0)).count();
    outcome(
        identical && negative as f64 >= 0.95 * runs.len() as f64 && secs < 120.0,
        format!(
            "spreads identical in {}/{} pairs; negative decay slope in {negative}/{}; {secs:.1} s",
            runs.iter().filter(|r| r.spreads_identical).count(),
            runs.len(),
            runs.len()
        ),
    )
}

fn c9() -> Outcome {
    let (params, cfg) = reduced(10, 40);
    let stream = build_turbulence(&params).unwrap();
    let setup = setup_for(&params, &stream, 300);
    let t = Instant::now();
    let rows = run_accuracy_experiment(&stream, &cfg, &setup, &[1.0, 0.3, 0.1], &seeds(20)).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let ratios: Vec<f64> = rows.iter().map(|r| r.error_over_eps).collect();
    let spread = ratios.iter().cloned().fold(f64::MIN, f64::max) / ratios.iter().cloned().fold(f64::MAX, f64::min);
    let cells: Vec<String> = rows
        .iter()
        .map(|r| format!("ε={}: |e|/ε = {:.4}", r.eps, r.error_over_eps))
        .collect();
    outcome(
        spread <= 2.0 && secs < 120.0,
        format!("{}; max/min {spread:.3} (≤ 2); {secs:.1} s", cells.join(", ")),
    )
}

fn c10() -> Outcome {
    let (params, cfg) = reduced(10, 40);
    let stream = build_turbulence(&params).unwrap();
    let setup = setup_for(&params, &stream, 300);
    let t = Instant::now();
    let exp = run_filter_experiment(&stream, &cfg, &setup, &seeds(20)).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let per_step = |f: &dyn Fn(&enkf_lab::diagnostics::FilterDiagnostics) -> f64| -> Vec<f64> {
        (0..setup.steps)
            .map(|n| exp.runs.iter().map(|r| f(&r.series[n])).sum::<f64>() / exp.runs.len() as f64)
            .collect()
    };
    let fidelity = per_step(&|row| row.cov_fidelity.max(1.0));
    let maha = per_step(&|row| row.maha_sq_per_d);
    let fid = enkf_lab::diagnostics::tail_mean(&fidelity, 100);
    let (m100, m50) = (
        enkf_lab::diagnostics::tail_mean(&maha, 100),
        enkf_lab::diagnostics::tail_mean(&maha, 50),
    );
    let plateau = m100 <= 2.0 * m50 && m50 <= 2.0 * m100;
    outcome(
        fid.is_finite() && fid <= 2.0 && plateau && secs < 120.0,
        format!(
            "mean max(1, ‖CR̃⁻¹‖) over the last 100 steps {fid:.4} (≤ 2); Mahalanobis/d last 100 {m100:.4}, \
             last 50 {m50:.4}; {secs:.1} s"
        ),
    )
}

/// Serialized outputs of every experiment kind, computed on the current
/// rayon pool.
fn all_outputs() -> Vec<String> {
    let (params, cfg) = reduced(6, 20);
    let stream = build_turbulence(&params).unwrap();
    let setup = setup_for(&params, &stream, 40);
    let s = seeds(4);
    let json = |v: &dyn erased::Json| v.to_json();
    let conc = ConcentrationConfig {
        trials: 100,
        ..ConcentrationConfig::new(40, 5, vec![10, 20])
    };
    vec![
        json(&verify_dim(&params).unwrap()),
        json(&run_filter_experiment(&stream, &cfg, &setup, &s).unwrap()),
        json(&run_concentration_experiment(&conc, 3).unwrap()),
        json(&run_stability_experiment(&stream, &cfg, &setup, &[1.0, 10.0], &s).unwrap()),
        json(&run_accuracy_experiment(&stream, &cfg, &setup, &[1.0, 0.1], &s).unwrap()),
    ]
}

mod erased {
    pub trait Json {
        fn to_json(&self) -> String;
    }
    impl<T: serde::Serialize> Json for T {
        fn to_json(&self) -> String {
            serde_json::to_string(self).unwrap()
        }
    }
}

fn c11() -> Outcome {
    let t = Instant::now();
    let first = all_outputs();
    let second = all_outputs();
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(all_outputs);
    let secs = t.elapsed().as_secs_f64();
    let same = first == second && first == single;
    outcome(
        same,
        format!(
            "simulate, verify-dim, rmt, stability and accuracy outputs byte-identical across 3 runs \
             (one on a single thread): {same}; {secs:.1} s"
        ),
    )
}

fn main() {
    let criteria: [Criterion; 11] = [
        (1, "effective dimension, unfiltered", c1),
        (2, "effective dimension, observed", c2),
        (3, "Kalman limit", c3),
        (4, "EAKF exactness", c4),
        (5, "Woodbury equivalence", c5),
        (6, "matrix lemmas", c6),
        (7, "concentration", c7),
        (8, "exponential stability", c8),
        (9, "filter accuracy", c9),
        (10, "covariance fidelity", c10),
        (11, "determinism", c11),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut unexpected = Vec::new();
    for (id, name, run) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let res = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let known = KNOWN_RED.contains(&id);
        let tag = match (res.pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!("criterion {id:>2} {tag}: {name}: {}", res.detail);
        if !res.pass && !known {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
