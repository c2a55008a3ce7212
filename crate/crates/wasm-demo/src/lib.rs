//! Browser bindings. Every export takes and returns JSON text.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use enkf_lab::diagnostics::{run_filter_seed, FilterDiagnostics};
use enkf_lab::effective_dim::{minimal_p_search, verify_dim, DimReport, RhoRow};
use enkf_lab::models::TurbulenceParams;

fn params_from(json: &str) -> Result<TurbulenceParams, String> {
    let params: TurbulenceParams = serde_json::from_str(json).map_err(|e| format!("model: {e}"))?;
    params.validate().map_err(|e| e.to_string())?;
    Ok(params)
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(|e| JsError::new(&e.to_string()))
}

/// Dimension report of the model at its own `rho`.
pub fn dim_report(model: &str) -> Result<DimReport, String> {
    verify_dim(&params_from(model)?).map_err(|e| e.to_string())
}

/// Effective dimension over a log-spaced grid of `n` thresholds in `[lo, hi]`.
pub fn rho_sweep(model: &str, lo: f64, hi: f64, n: usize) -> Result<Vec<RhoRow>, String> {
    if !(lo > 0.0 && hi > lo) || n < 2 {
        return Err("need 0 < lo < hi and n >= 2".into());
    }
    let grid: Vec<f64> = (0..n)
        .map(|i| (lo.ln() + (hi / lo).ln() * i as f64 / (n - 1) as f64).exp())
        .collect();
    minimal_p_search(&params_from(model)?, &grid).map_err(|e| e.to_string())
}

#[derive(Serialize)]
pub struct FilterRun {
    pub p: usize,
    pub series: Vec<FilterDiagnostics>,
}

/// One filter run from the climatology, with `p` from the dimension check
/// when `p == 0`.
pub fn filter_run(model: &str, k: usize, p: usize, steps: usize, seed: u64) -> Result<FilterRun, String> {
    let text = format!(
        r#"{{"model": {{"turbulence": {model}}}, "enkf": {{"k": {k}{}}}, "T": {steps}}}"#,
        if p == 0 {
            String::new()
        } else {
            format!(r#", "p": {p}"#)
        }
    );
    let cfg = enkf_lab::config::parse_config(&text).map_err(|e| e.to_string())?;
    cfg.validate().map_err(|e| e.to_string())?;
    let enkf = cfg.enkf_config().map_err(|e| e.to_string())?;
    let (stream, setup) = cfg.filter_setup().map_err(|e| e.to_string())?;
    let run = run_filter_seed(&stream, &enkf, &setup, seed).map_err(|e| e.to_string())?;
    Ok(FilterRun {
        p: enkf.p,
        series: run.series,
    })
}

#[wasm_bindgen(js_name = verifyDim)]
pub fn verify_dim_js(model: &str) -> Result<String, JsError> {
    to_json(&dim_report(model).map_err(|e| JsError::new(&e))?)
}

#[wasm_bindgen(js_name = rhoSweep)]
pub fn rho_sweep_js(model: &str, lo: f64, hi: f64, n: usize) -> Result<String, JsError> {
    to_json(&rho_sweep(model, lo, hi, n).map_err(|e| JsError::new(&e))?)
}

#[wasm_bindgen(js_name = runFilter)]
pub fn filter_run_js(model: &str, k: usize, p: usize, steps: usize, seed: u64) -> Result<String, JsError> {
    to_json(&filter_run(model, k, p, steps, seed).map_err(|e| JsError::new(&e))?)
}
