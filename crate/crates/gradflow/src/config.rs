//! Run configuration: a JSON document with every field defaulted except the
//! problem kind.

use std::fmt;

use gradflow_core::bsde::RegressionBasis;
use gradflow_core::flow::{FlowConfig, StorePolicy};
use gradflow_core::models::{
    example_logistic, example_lq_modified, example_quartic, quadratic_toy, LogisticParams, LqParams, ScalarModel,
};
use gradflow_core::msa::MsaConfig;
use gradflow_core::prox::{ProxSettings, UpdateMode};
use gradflow_core::{BrownianEnsemble, EnsembleShape, TimeGrid};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("malformed config at line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },
    #[error("invalid value for {key}: {msg}")]
    Invalid { key: String, msg: String },
}

fn bad(key: &str, msg: impl fmt::Display) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        msg: msg.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    LqModified,
    Quartic,
    Logistic,
    QuadraticToy,
}

/// Overrides for the model coefficients. Which keys apply depends on the
/// problem kind; the rest are rejected at validation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemParams {
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "A")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "B")]
    pub b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "C")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "D")]
    pub d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "L")]
    pub l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "M")]
    pub m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "N")]
    pub n: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_bound: Option<f64>,
}

impl ProblemParams {
    fn named(&self) -> [(&'static str, Option<f64>); 14] {
        [
            ("A", self.a),
            ("B", self.b),
            ("beta", self.beta),
            ("C", self.c),
            ("D", self.d),
            ("gamma", self.gamma),
            ("L", self.l),
            ("M", self.m),
            ("N", self.n),
            ("x0", self.x0),
            ("sigma_x", self.sigma_x),
            ("sigma_a", self.sigma_a),
            ("sigma_c", self.sigma_c),
            ("y_bound", self.y_bound),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    #[serde(default)]
    pub params: ProblemParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n_steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            n_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub n_paths: usize,
    pub seed: u64,
    /// Extra paths used only to fit the regressions; `0` fits on the
    /// evaluation paths.
    pub n_regression_paths: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            seed: 42,
            n_regression_paths: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Implicit,
    Explicit,
}

impl From<Scheme> for UpdateMode {
    fn from(s: Scheme) -> Self {
        match s {
            Scheme::Implicit => UpdateMode::Implicit,
            Scheme::Explicit => UpdateMode::Explicit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tau0: f64,
    pub max_outer: usize,
    pub stop_dj: f64,
    pub backtrack: bool,
    pub scheme: Scheme,
    pub basis_degree: usize,
    pub include_control: bool,
    pub prox_tol: f64,
    pub prox_max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let msa = MsaConfig::default();
        Self {
            tau0: msa.tau0,
            max_outer: msa.max_outer,
            stop_dj: msa.stop_dj,
            backtrack: msa.backtrack,
            scheme: Scheme::Implicit,
            basis_degree: msa.basis.degree,
            include_control: msa.basis.include_control,
            prox_tol: msa.prox.tol,
            prox_max_iter: msa.prox.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    #[serde(rename = "S")]
    pub horizon: f64,
    pub tau: f64,
    pub scheme: Scheme,
    /// Keep every `store_every`-th control; `0` keeps about a hundred.
    pub store_every: usize,
}

impl Default for FlowSection {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            tau: 0.01,
            scheme: Scheme::Explicit,
            store_every: 0,
        }
    }
}

/// The initial control, constant in time and across paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub value: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { value: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: String,
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: "out".into(),
            formats: vec![Format::Csv, Format::Json],
        }
    }
}

/// Settings of the `verify` subcommands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Flow steps of the τ-rate check.
    pub tau_list: Vec<f64>,
    /// Flow times of the sublinear, exponential and gradient checks.
    pub s_list: Vec<f64>,
    /// Bound on the final `‖D_a H‖²` for the gradient check.
    pub grad_threshold: f64,
    /// Strong-convexity modulus; defaults to the model's when it has one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Step of the fixed-step iteration that produces `α*`.
    pub optimum_tau: f64,
    pub optimum_max_iter: usize,
    /// Largest admissible relative error of the energy identity.
    pub energy_tol: f64,
    /// Random control pairs for the gap bound.
    pub gap_pairs: usize,
    /// Feedback `α = gain·X + offset` used to validate the adjoint solver.
    pub bsde_gain: f64,
    pub bsde_offset: f64,
    pub bsde_tol_y: f64,
    pub bsde_tol_z: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            tau_list: vec![0.1, 0.05, 0.025],
            s_list: vec![1.0, 2.0, 4.0, 8.0],
            grad_threshold: 1e-3,
            eta: None,
            optimum_tau: 1.0,
            optimum_max_iter: 200,
            energy_tol: 0.1,
            gap_pairs: 10,
            bsde_gain: -0.5,
            bsde_offset: 0.1,
            bsde_tol_y: 0.02,
            bsde_tol_z: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
}

/// Parses and validates a JSON config.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if inner.is_data() && path != "." {
            bad(&path, inner)
        } else {
            ConfigError::Parse {
                line: inner.line(),
                column: inner.column(),
                msg: inner.to_string(),
            }
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    /// Canonical serialization: defaults filled, fixed key order, pretty
    /// printed with a trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let finite = |key: &str, v: f64| if v.is_finite() { Ok(()) } else { Err(bad(key, "must be finite")) };
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(bad(key, format!("must be positive, got {v}")))
            }
        };
        positive("grid.T", self.grid.horizon)?;
        if self.grid.n_steps == 0 {
            return Err(bad("grid.n_steps", "must be at least 1"));
        }
        if self.ensemble.n_paths < 2 {
            return Err(bad("ensemble.n_paths", "must be at least 2"));
        }
        positive("solver.tau0", self.solver.tau0)?;
        if self.solver.max_outer == 0 {
            return Err(bad("solver.max_outer", "must be at least 1"));
        }
        finite("solver.stop_dj", self.solver.stop_dj)?;
        if self.solver.basis_degree == 0 {
            return Err(bad("solver.basis_degree", "must be at least 1"));
        }
        positive("solver.prox_tol", self.solver.prox_tol)?;
        if self.solver.prox_max_iter == 0 {
            return Err(bad("solver.prox_max_iter", "must be at least 1"));
        }
        positive("flow.S", self.flow.horizon)?;
        positive("flow.tau", self.flow.tau)?;
        finite("init.value", self.init.value)?;
        if self.output.directory.is_empty() {
            return Err(bad("output.directory", "must not be empty"));
        }
        for (i, t) in self.verify.tau_list.iter().enumerate() {
            positive(&format!("verify.tau_list[{i}]"), *t)?;
        }
        for (i, s) in self.verify.s_list.iter().enumerate() {
            positive(&format!("verify.s_list[{i}]"), *s)?;
        }
        positive("verify.grad_threshold", self.verify.grad_threshold)?;
        if let Some(eta) = self.verify.eta {
            positive("verify.eta", eta)?;
        }
        positive("verify.optimum_tau", self.verify.optimum_tau)?;
        positive("verify.energy_tol", self.verify.energy_tol)?;
        finite("verify.bsde_gain", self.verify.bsde_gain)?;
        finite("verify.bsde_offset", self.verify.bsde_offset)?;
        positive("verify.bsde_tol_y", self.verify.bsde_tol_y)?;
        positive("verify.bsde_tol_z", self.verify.bsde_tol_z)?;
        let allowed: &[&str] = match self.problem.kind {
            ProblemKind::LqModified | ProblemKind::Quartic => {
                &["A", "B", "beta", "C", "D", "gamma", "L", "M", "N", "x0"]
            }
            ProblemKind::Logistic => &["A", "sigma_x", "sigma_a", "sigma_c", "L", "M", "N", "x0", "y_bound"],
            ProblemKind::QuadraticToy => &["x0"],
        };
        for (name, v) in self.problem.params.named() {
            if let Some(v) = v {
                let key = format!("problem.params.{name}");
                if !allowed.contains(&name) {
                    return Err(bad(&key, format!("not a parameter of {:?}", self.problem.kind)));
                }
                finite(&key, v)?;
            }
        }
        self.model().map(|_| ())
    }

    pub fn model(&self) -> Result<ScalarModel, ConfigError> {
        let p = &self.problem.params;
        let key = "problem.params";
        let model = match self.problem.kind {
            ProblemKind::LqModified | ProblemKind::Quartic => {
                let d = LqParams::default();
                let lq = LqParams {
                    a: p.a.unwrap_or(d.a),
                    b: p.b.unwrap_or(d.b),
                    beta: p.beta.unwrap_or(d.beta),
                    c: p.c.unwrap_or(d.c),
                    d: p.d.unwrap_or(d.d),
                    gamma: p.gamma.unwrap_or(d.gamma),
                    l: p.l.unwrap_or(d.l),
                    m: p.m.unwrap_or(d.m),
                    n: p.n.unwrap_or(d.n),
                    x0: p.x0.unwrap_or(d.x0),
                };
                if self.problem.kind == ProblemKind::LqModified {
                    example_lq_modified(lq)
                } else {
                    example_quartic(lq)
                }
            }
            ProblemKind::Logistic => {
                let d = LogisticParams::default();
                example_logistic(LogisticParams {
                    amp: p.a.unwrap_or(d.amp),
                    sigma_x: p.sigma_x.unwrap_or(d.sigma_x),
                    sigma_a: p.sigma_a.unwrap_or(d.sigma_a),
                    sigma_c: p.sigma_c.unwrap_or(d.sigma_c),
                    l: p.l.unwrap_or(d.l),
                    m: p.m.unwrap_or(d.m),
                    n: p.n.unwrap_or(d.n),
                    x0: p.x0.unwrap_or(d.x0),
                    y_bound: p.y_bound.unwrap_or(d.y_bound),
                })
            }
            ProblemKind::QuadraticToy => quadratic_toy(p.x0.unwrap_or(0.0)),
        };
        model.map_err(|e| bad(key, e))
    }

    pub fn shape(&self) -> EnsembleShape {
        let shape = EnsembleShape::scalar(self.ensemble.n_paths).expect("validated");
        shape.with_regression_paths(self.ensemble.n_regression_paths)
    }

    pub fn time_grid(&self) -> TimeGrid {
        TimeGrid::new(self.grid.horizon, self.grid.n_steps).expect("validated")
    }

    pub fn brownian(&self) -> BrownianEnsemble {
        BrownianEnsemble::sample(self.ensemble.seed, self.shape(), self.time_grid())
    }

    pub fn basis(&self) -> RegressionBasis {
        RegressionBasis {
            degree: self.solver.basis_degree,
            include_control: self.solver.include_control,
            ..RegressionBasis::default()
        }
    }

    pub fn prox(&self) -> ProxSettings {
        ProxSettings {
            tol: self.solver.prox_tol,
            max_iter: self.solver.prox_max_iter,
        }
    }

    pub fn msa(&self) -> MsaConfig {
        MsaConfig {
            tau0: self.solver.tau0,
            max_outer: self.solver.max_outer,
            stop_dj: self.solver.stop_dj,
            backtrack: self.solver.backtrack,
            basis: self.basis(),
            prox: self.prox(),
            mode: self.solver.scheme.into(),
        }
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            basis: self.basis(),
            prox: self.prox(),
            store: match self.flow.store_every {
                0 => StorePolicy::Thinned,
                k => StorePolicy::Every(k),
            },
        }
    }
}
