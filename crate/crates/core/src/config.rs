//! Experiment configuration files.
//!
//! Parsing is strict: unknown keys anywhere are errors, and every error names
//! the offending field as a dotted path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::ConcentrationConfig;
use crate::diagnostics::{turbulence_climatology, turbulence_reference, FilterSetup};
use crate::effective_dim::{verify_dim, verify_dim_general, DimReport};
use crate::enkf::EnkfConfig;
use crate::error::{Error, Result};
use crate::kalman_ref::AugmentedParams;
use crate::models::{build_turbulence, TurbulenceParams, TurbulenceStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    VerifyDim,
    Rmt,
    Stability,
    Accuracy,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::VerifyDim => "verify-dim",
            ExperimentKind::Rmt => "rmt",
            ExperimentKind::Stability => "stability",
            ExperimentKind::Accuracy => "accuracy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinModel {
    /// `J = 50`, `τ = 0.6`, no observations.
    KolmogorovUnfiltered,
    /// `J = 50`, observed at every grid point with `σᵒ = 10`.
    KolmogorovObserved,
    /// The observed model truncated at `J = 10`.
    KolmogorovObservedReduced,
}

impl BuiltinModel {
    pub fn params(self) -> TurbulenceParams {
        match self {
            BuiltinModel::KolmogorovUnfiltered => TurbulenceParams::kolmogorov(),
            BuiltinModel::KolmogorovObserved => TurbulenceParams::kolmogorov_observed(),
            BuiltinModel::KolmogorovObservedReduced => TurbulenceParams {
                j: 10,
                ..TurbulenceParams::kolmogorov_observed()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Builtin(BuiltinModel),
    Turbulence(Box<TurbulenceParams>),
}

impl ModelSpec {
    pub fn params(&self) -> TurbulenceParams {
        match self {
            ModelSpec::Builtin(b) => b.params(),
            ModelSpec::Turbulence(p) => (**p).clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnkfSection {
    #[serde(default = "defaults::k")]
    pub k: usize,
    /// Defaults to the eigenvalue-direction count of the dimension check.
    #[serde(default)]
    pub p: Option<usize>,
}

impl Default for EnkfSection {
    fn default() -> Self {
        EnkfSection {
            k: defaults::k(),
            p: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedSpec {
    List(Vec<u64>),
    Range(SeedRange),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRange {
    pub base: u64,
    pub count: usize,
}

impl Default for SeedSpec {
    fn default() -> Self {
        SeedSpec::Range(SeedRange { base: 1, count: 1 })
    }
}

impl SeedSpec {
    pub fn seeds(&self) -> Vec<u64> {
        match self {
            SeedSpec::List(v) => v.clone(),
            SeedSpec::Range(r) => (0..r.count as u64).map(|i| r.base + i).collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SeedSpec::List(v) => v.len(),
            SeedSpec::Range(r) => r.count,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyDimSection {
    /// Extra thresholds to tabulate.
    #[serde(default)]
    pub rho_grid: Vec<f64>,
    /// Used for models with a jump process, where no closed form applies.
    #[serde(default = "defaults::burn_in")]
    pub burn_in: usize,
    #[serde(default = "defaults::window")]
    pub window: usize,
}

impl Default for VerifyDimSection {
    fn default() -> Self {
        VerifyDimSection {
            rho_grid: Vec::new(),
            burn_in: defaults::burn_in(),
            window: defaults::window(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySection {
    #[serde(default = "defaults::shifts")]
    pub shifts: Vec<f64>,
}

impl Default for StabilitySection {
    fn default() -> Self {
        StabilitySection {
            shifts: defaults::shifts(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccuracySection {
    #[serde(default = "defaults::eps")]
    pub eps: Vec<f64>,
}

impl Default for AccuracySection {
    fn default() -> Self {
        AccuracySection { eps: defaults::eps() }
    }
}

mod defaults {
    pub fn k() -> usize {
        40
    }
    pub fn steps() -> usize {
        300
    }
    pub fn burn_in() -> usize {
        200
    }
    pub fn window() -> usize {
        200
    }
    pub fn shifts() -> Vec<f64> {
        vec![10.0]
    }
    pub fn eps() -> Vec<f64> {
        vec![1.0, 0.3, 0.1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// When set, must match the subcommand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentKind>,
    pub model: ModelSpec,
    #[serde(default)]
    pub enkf: EnkfSection,
    #[serde(rename = "T", default = "defaults::steps")]
    pub steps: usize,
    #[serde(default)]
    pub seeds: SeedSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub verify_dim: VerifyDimSection,
    #[serde(default)]
    pub stability: StabilitySection,
    #[serde(default)]
    pub accuracy: AccuracySection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmt: Option<ConcentrationConfig>,
}

/// Parses a config from JSON text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let message = e.into_inner().to_string();
        let field = if path == "." { "(root)".to_string() } else { path };
        Error::config(field, message)
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config file: {e}")))?;
    parse_config(&text)
}

impl ExperimentConfig {
    /// Checks every constraint that does not need a model run, naming the
    /// field on failure.
    pub fn validate(&self) -> Result<()> {
        let params = self.model.params();
        if let Err(e) = params.validate() {
            let msg = match e {
                Error::InvalidParams(m) | Error::InvalidChain(m) => m,
                other => other.to_string(),
            };
            let key = msg.split([' ', '.']).next().unwrap_or("").to_string();
            let base = match self.model {
                ModelSpec::Builtin(_) => "model.builtin",
                ModelSpec::Turbulence(_) => "model.turbulence",
            };
            return Err(Error::config(format!("{base}.{key}"), msg));
        }
        if self.steps < 1 {
            return Err(Error::config("T", "T must be ≥ 1"));
        }
        if self.enkf.k < 2 {
            return Err(Error::config("enkf.k", format!("K={} must be ≥ 2", self.enkf.k)));
        }
        if let Some(p) = self.enkf.p {
            let d = params.dim();
            if p < 1 || p > d {
                return Err(Error::config("enkf.p", format!("p={p} must satisfy 1 ≤ p ≤ d={d}")));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.verify_dim.rho_grid.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::config("verify_dim.rho_grid", "entries must be > 0"));
        }
        if params.jump_spec.is_some() && !self.verify_dim.rho_grid.is_empty() {
            return Err(Error::config(
                "verify_dim.rho_grid",
                "the threshold search needs a time-homogeneous model (no jump_spec)",
            ));
        }
        if self.verify_dim.window < 1 {
            return Err(Error::config("verify_dim.window", "window must be ≥ 1"));
        }
        if self.accuracy.eps.is_empty() || self.accuracy.eps.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::config(
                "accuracy.eps",
                "entries must be > 0 and the list nonempty",
            ));
        }
        if self.stability.shifts.iter().any(|s| !s.is_finite()) {
            return Err(Error::config("stability.shifts", "entries must be finite"));
        }
        if let Some(rmt) = &self.rmt {
            rmt.validate().map_err(|e| Error::config("rmt", e.to_string()))?;
        }
        Ok(())
    }

    /// Checks that the config may drive `kind`.
    pub fn check_kind(&self, kind: ExperimentKind) -> Result<()> {
        match self.experiment {
            Some(k) if k != kind => Err(Error::config(
                "experiment",
                format!("config is for `{}`, not `{}`", k.name(), kind.name()),
            )),
            _ => Ok(()),
        }
    }

    /// Dimension report of the model: the closed-form checks for a
    /// time-homogeneous model, the iterated recursion with a jump process.
    pub fn dim_report(&self) -> Result<DimReport> {
        let params = self.model.params();
        if params.jump_spec.is_some() {
            let stream = build_turbulence(&params)?;
            verify_dim_general(
                &stream,
                &AugmentedParams::of_turbulence(&params),
                self.verify_dim.burn_in,
                self.verify_dim.window,
            )
        } else {
            verify_dim(&params)
        }
    }

    /// Filter parameters, with `p` from the dimension check when unset
    /// (clamped to `[1, d]`).
    pub fn enkf_config(&self) -> Result<EnkfConfig> {
        let params = self.model.params();
        let p = match self.enkf.p {
            Some(p) => p,
            None => self.dim_report()?.eigen_effective.clamp(1, params.dim()),
        };
        Ok(EnkfConfig {
            k: self.enkf.k,
            p,
            r: params.r,
            rho: params.rho,
            tau: params.tau,
        })
    }

    /// Model stream and filter setup: truth and ensemble start from the
    /// climatology `N(0, diag(E_k/2))`.
    pub fn filter_setup(&self) -> Result<(TurbulenceStream, FilterSetup)> {
        let params = self.model.params();
        let stream = build_turbulence(&params)?;
        let reference = turbulence_reference(&stream, self.steps)?;
        let setup = FilterSetup {
            steps: self.steps,
            initial_mean: nalgebra::DVector::zeros(params.dim()),
            initial_cov: turbulence_climatology(&params),
            reference,
        };
        Ok((stream, setup))
    }

    pub fn concentration(&self) -> ConcentrationConfig {
        self.rmt
            .clone()
            .unwrap_or_else(|| ConcentrationConfig::new(200, 5, vec![10, 20, 40, 80]))
    }

    /// The config with every default spelled out: the model as explicit
    /// parameters, `p` filled in and seeds listed.
    pub fn resolved(&self, seed_override: Option<u64>) -> Result<ExperimentConfig> {
        self.validate()?;
        let mut out = self.clone();
        out.model = ModelSpec::Turbulence(Box::new(self.model.params()));
        out.enkf.p = Some(self.enkf_config()?.p);
        if let Some(base) = seed_override {
            out.seeds = SeedSpec::Range(SeedRange {
                base,
                count: self.seeds.len(),
            });
        }
        out.seeds = SeedSpec::List(out.seeds.seeds());
        if self.rmt.is_some() || self.experiment == Some(ExperimentKind::Rmt) {
            out.rmt = Some(self.concentration());
        }
        Ok(out)
    }
}
