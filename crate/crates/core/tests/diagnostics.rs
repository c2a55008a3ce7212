mod common;

use common::*;
use enkf_lab::diagnostics::output::{series_rows, write_series_csv};
use enkf_lab::diagnostics::{
    run_filter_experiment, run_filter_seed, turbulence_climatology, turbulence_reference, FilterDiagnostics,
    FilterSetup,
};
use enkf_lab::effective_dim::verify_dim;
use enkf_lab::enkf::{enkf_forecast_with, EnkfConfig, Ensemble, StepNoise};
use enkf_lab::kalman_ref::InstabilityCovariance;
use enkf_lab::linalg::{kalman_update_operator, SymMatrix};
use enkf_lab::models::{build_turbulence, StepCoefficients, TurbulenceParams};
use enkf_lab::rng::{substream, Domain};
use enkf_lab::sampling::{random_matrix, random_psd};
use nalgebra::{DMatrix, DVector};

#[test]
fn sampling_deflates_the_posterior_on_average() {
    let (d, k, trials) = (4, 6, 10_000);
    let mut rng = substream(4, Domain::Instance, 0, 0);
    let a = random_matrix(&mut rng, d, d) * 0.6;
    let h = random_matrix(&mut rng, 2, d);
    let sigma_plus = random_psd(&mut rng, d, 2, 0.2, 1.0);
    let ens = Ensemble::from_members(&random_matrix(&mut rng, d, k)).unwrap();
    let coeffs = StepCoefficients::dense(a, DVector::zeros(d), SymMatrix::zeros(d), h.clone()).unwrap();
    let plus = InstabilityCovariance::from_factor(sigma_plus.psd_factor());
    let cfg = EnkfConfig {
        k,
        p: d,
        r: 1.0,
        rho: 0.05,
        tau: 1.0,
    };
    let mut sum_post = DMatrix::zeros(d, d);
    let mut sum_sq = DMatrix::zeros(d, d);
    let mut sum_chat = DMatrix::zeros(d, d);
    for t in 0..trials {
        let f = enkf_forecast_with(&ens, &coeffs, &plus, &cfg, StepNoise { seed: 9, step: t }).unwrap();
        let chat = SymMatrix::from_factor(&(&f.spread / ((k - 1) as f64).sqrt())).add_identity(cfg.additive_level());
        let post = kalman_update_operator(&chat, &h).unwrap().into_matrix();
        sum_sq += post.component_mul(&post);
        sum_post += post;
        sum_chat += chat.into_matrix();
    }
    let n = trials as f64;
    let mean_post = &sum_post / n;
    let var = (&sum_sq / n - mean_post.component_mul(&mean_post)) * (n / (n - 1.0));
    let se = (var.sum() / n).sqrt();
    let of_mean = kalman_update_operator(&sym(&sum_chat / n), &h).unwrap();
    let gap = of_mean.sub(&sym(mean_post)).eigen().eigenvalues.min();
    assert!(gap >= -3.0 * se, "min eigenvalue {gap} vs standard error {se}");
}

fn reduced(j: usize) -> (TurbulenceParams, EnkfConfig) {
    let params = TurbulenceParams {
        j,
        ..TurbulenceParams::kolmogorov_observed()
    };
    let rep = verify_dim(&params).unwrap();
    let cfg = EnkfConfig {
        k: 40,
        p: rep.eigen_effective.clamp(1, params.dim()),
        r: params.r,
        rho: params.rho,
        tau: params.tau,
    };
    (params, cfg)
}

#[test]
fn truncation_impact_is_dominated_by_fidelity_ratio() {
    let (params, cfg) = reduced(10);
    let stream = build_turbulence(&params).unwrap();
    let setup = FilterSetup {
        steps: 150,
        initial_mean: DVector::zeros(params.dim()),
        initial_cov: turbulence_climatology(&params),
        reference: turbulence_reference(&stream, 150).unwrap(),
    };
    for seed in 1..=3 {
        let run = run_filter_seed(&stream, &cfg, &setup, seed).unwrap();
        for row in &run.series {
            assert!(row.chi <= row.nu * (1.0 + SLACK), "{row:?}");
        }
    }
}

fn filled(n: usize) -> Vec<FilterDiagnostics> {
    (0..n)
        .map(|i| {
            let x = (i as f64 + 0.5).sqrt() / 3.0;
            FilterDiagnostics {
                step: i + 1,
                maha_sq_per_d: x,
                l2_error: 1.0 / x,
                nu: 1.0 + x,
                lambda: 1.0 + x * 1e-12,
                mu: std::f64::consts::PI * x,
                chi: 1.0,
                cov_fidelity: if i % 7 == 0 { f64::NAN } else { x * 1e300 },
            }
        })
        .collect()
}

fn read_back(path: &std::path::Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header,
        [
            "step",
            "maha_sq_per_d",
            "l2_error",
            "nu",
            "lambda",
            "mu",
            "chi",
            "cov_fidelity"
        ]
    );
    r.records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect()
}

#[test]
fn series_csv_parses_in_a_generic_reader() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("series.csv");
    let series = filled(10_000);
    write_series_csv(&path, &["run".into(), "seed: 1".into()], &series).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(!text.contains('\r'));
    let rows = read_back(&path);
    assert_eq!(rows.len(), series.len());
    for (row, want) in rows.iter().zip(&series) {
        assert_eq!(row.len(), 8);
        let got: Vec<f64> = row[1..].iter().map(|v| v.parse().unwrap()).collect();
        for (g, w) in got.iter().zip(want.metrics()) {
            assert!(g.to_bits() == w.to_bits() || (g.is_nan() && w.is_nan()));
        }
        assert_eq!(row[0].parse::<usize>().unwrap(), want.step);
    }

    let empty = dir.path().join("empty.csv");
    write_series_csv(&empty, &[], &[]).unwrap();
    assert!(read_back(&empty).is_empty());
    assert_eq!(series_rows(&series[..3]).len(), 3);
}

#[test]
fn experiment_outputs_are_reproducible_bitwise() {
    let (params, cfg) = reduced(6);
    let stream = build_turbulence(&params).unwrap();
    let setup = FilterSetup {
        steps: 40,
        initial_mean: DVector::zeros(params.dim()),
        initial_cov: turbulence_climatology(&params),
        reference: turbulence_reference(&stream, 40).unwrap(),
    };
    let dir = tempfile::tempdir().unwrap();
    let mut texts = Vec::new();
    for pass in 0..2 {
        let exp = run_filter_experiment(&stream, &cfg, &setup, &[5, 6, 7]).unwrap();
        let path = dir.path().join(format!("run{pass}.csv"));
        let all: Vec<FilterDiagnostics> = exp.runs.iter().flat_map(|r| r.series.clone()).collect();
        write_series_csv(&path, &[], &all).unwrap();
        texts.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
}
