//! The subcommands behind the `gradflow` binary.

use std::path::{Path, PathBuf};

use gradflow_core::analysis::{
    random_adapted_control, reference_optimum, verify_exponential_rate, verify_gradient_vanishing,
    verify_sublinear_rate, verify_tau_rate, verify_tau_rate_exact, RateFit, ReferenceOptimum,
};
use gradflow_core::bsde::{relative_rms, solve_adjoint_lq_analytic, solve_adjoint_lsmc, AffineFeedback, LqOracle};
use gradflow_core::flow::{energy_identity_check, gap_bound_check, run_gradient_flow};
use gradflow_core::msa::{run_msa, Termination};
use gradflow_core::sde::simulate_closed_loop;
use gradflow_core::{BrownianEnsemble, ControlField};
use serde_json::{json, Value};

use crate::config::{ConfigError, Format, ProblemKind, RunConfig};
use crate::output;

/// Which convergence check `verify` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Check {
    TauRate,
    Sublinear,
    Exponential,
    GradVanishing,
    EnergyIdentity,
    GapBound,
}

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write output: {0}")]
    Write(#[from] std::io::Error),
    #[error(transparent)]
    Solver(#[from] gradflow_core::Error),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{0}")]
    Unsupported(String),
}

/// Result of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    CheckFailed,
}

impl Outcome {
    fn from_pass(pass: bool) -> Self {
        if pass {
            Outcome::Ok
        } else {
            Outcome::CheckFailed
        }
    }
}

/// Loads the config and applies the command-line overrides.
pub fn load_config(
    path: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    paths: Option<usize>,
) -> Result<RunConfig, AppError> {
    let text = std::fs::read_to_string(path).map_err(|source| AppError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cfg = crate::config::parse_config(&text)?;
    if let Some(dir) = out {
        cfg.output.directory = dir.to_string_lossy().into_owned();
    }
    if let Some(seed) = seed {
        cfg.ensemble.seed = seed;
    }
    if let Some(n) = paths {
        cfg.ensemble.n_paths = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Sink<'a> {
    cfg: &'a RunConfig,
    dir: PathBuf,
}

impl<'a> Sink<'a> {
    fn new(cfg: &'a RunConfig) -> Self {
        Self {
            cfg,
            dir: PathBuf::from(&cfg.output.directory),
        }
    }

    fn csv(&self, name: &str, text: &str) -> Result<(), AppError> {
        if !output::csv_all_finite(text) {
            return Err(AppError::NonFinite(name.into()));
        }
        if self.cfg.output.formats.contains(&Format::Csv) {
            output::write(&self.dir, name, text)?;
        }
        Ok(())
    }

    /// Writes `body` with the config attached under `"config"`.
    fn json(&self, name: &str, mut body: Value) -> Result<(), AppError> {
        if !output::json_all_finite(&body) {
            return Err(AppError::NonFinite(name.into()));
        }
        body["config"] = serde_json::to_value(self.cfg).expect("config serializes");
        if self.cfg.output.formats.contains(&Format::Json) {
            output::write(&self.dir, name, &output::json_text(&body))?;
        }
        Ok(())
    }
}

fn initial_control(cfg: &RunConfig, w: &BrownianEnsemble) -> Result<ControlField, AppError> {
    Ok(ControlField::constant(*w.shape(), *w.grid(), &[cfg.init.value])?)
}

fn fit_json(fit: &RateFit) -> Value {
    json!({
        "slope": fit.slope,
        "intercept": fit.intercept,
        "r_squared": fit.r_squared,
        "pairs": fit.pairs.iter().map(|(s, e)| json!([s, e])).collect::<Vec<_>>(),
    })
}

pub fn run_msa_cmd(cfg: &RunConfig) -> Result<Outcome, AppError> {
    let pb = cfg.model()?;
    let w = cfg.brownian();
    let a0 = initial_control(cfg, &w)?;
    let report = run_msa(&pb, &a0, &w, &cfg.msa())?;
    let sink = Sink::new(cfg);
    sink.csv("msa_trace.csv", &output::msa_trace_csv(&report.records))?;
    let last = report.records.last().expect("at least the initial record");
    sink.json(
        "msa_report.json",
        json!({
            "termination": match report.termination {
                Termination::CostDecrement => "cost_decrement",
                Termination::MaxIterations => "max_iterations",
            },
            "iterations": last.iter,
            "J": last.j,
            "grad_norm_sq": last.grad_norm_sq,
        }),
    )?;
    Ok(Outcome::Ok)
}

pub fn run_flow_cmd(cfg: &RunConfig) -> Result<Outcome, AppError> {
    let pb = cfg.model()?;
    let w = cfg.brownian();
    let a0 = initial_control(cfg, &w)?;
    let traj = run_gradient_flow(
        &pb,
        &a0,
        &w,
        cfg.flow.horizon,
        cfg.flow.tau,
        cfg.flow.scheme.into(),
        &cfg.flow_config(),
    )?;
    let sink = Sink::new(cfg);
    sink.csv("flow_trace.csv", &output::flow_trace_csv(&traj))?;
    sink.json(
        "flow_report.json",
        json!({
            "n_steps": traj.n_steps(),
            "tau": traj.tau,
            "J_initial": traj.j_trace[0],
            "J_final": traj.j_trace[traj.n_steps()],
            "grad_norm_sq_final": traj.grad_norm_sq_trace[traj.n_steps()],
        }),
    )?;
    Ok(Outcome::Ok)
}

fn optimum(cfg: &RunConfig, w: &BrownianEnsemble, a0: &ControlField) -> Result<ReferenceOptimum, AppError> {
    let pb = cfg.model()?;
    Ok(reference_optimum(
        &pb,
        a0,
        w,
        cfg.verify.optimum_tau,
        cfg.verify.optimum_max_iter,
        1e-13,
        &cfg.flow_config(),
    )?)
}

pub fn verify_cmd(cfg: &RunConfig, check: Check) -> Result<Outcome, AppError> {
    let pb = cfg.model()?;
    let w = cfg.brownian();
    let a0 = initial_control(cfg, &w)?;
    let fcfg = cfg.flow_config();
    let scheme = cfg.flow.scheme.into();
    let v = &cfg.verify;
    let sink = Sink::new(cfg);
    match check {
        Check::TauRate => {
            let toy = cfg.problem.kind == ProblemKind::QuadraticToy;
            let rep = if toy {
                let exact = |s: f64| Ok(a0.scaled((-2.0 * s).exp()));
                verify_tau_rate_exact(&pb, &a0, &w, cfg.flow.horizon, &v.tau_list, &fcfg, exact)?
            } else {
                verify_tau_rate(&pb, &a0, &w, cfg.flow.horizon, &v.tau_list, &fcfg)?
            };
            let band = if toy { [0.9, 1.1] } else { [0.7, 1.3] };
            let pass = (band[0]..=band[1]).contains(&rep.fit.slope);
            let rows: Vec<Vec<f64>> = rep.errors.iter().map(|(t, e)| vec![*t, *e]).collect();
            sink.csv("tau_rate.csv", &output::table_csv(&["tau", "error"], &rows))?;
            let mut body = fit_json(&rep.fit);
            body["reference"] = json!(if toy { "exact" } else { "refined" });
            if let Some(t) = rep.tau_ref {
                body["tau_ref"] = json!(t);
            }
            body["slope_band"] = json!(band);
            body["passed"] = json!(pass);
            sink.json("rate_fit.json", body)?;
            Ok(Outcome::from_pass(pass))
        }
        Check::Sublinear => {
            let opt = optimum(cfg, &w, &a0)?;
            let rep = verify_sublinear_rate(&pb, &a0, &w, &v.s_list, cfg.flow.tau, scheme, &fcfg, &opt.control)?;
            let rows: Vec<Vec<f64>> = rep
                .gaps
                .iter()
                .zip(&rep.envelope)
                .map(|(g, e)| vec![g.s, g.gap, g.stderr, *e])
                .collect();
            sink.csv("sublinear.csv", &output::table_csv(&["S", "gap", "stderr", "envelope"], &rows))?;
            sink.json(
                "sublinear.json",
                json!({
                    "J_star": opt.cost,
                    "optimum_grad_norm_sq": opt.grad_norm_sq,
                    "optimum_iterations": opt.iterations,
                    "S": rep.gaps.iter().map(|g| g.s).collect::<Vec<_>>(),
                    "gap": rep.gaps.iter().map(|g| g.gap).collect::<Vec<_>>(),
                    "stderr": rep.gaps.iter().map(|g| g.stderr).collect::<Vec<_>>(),
                    "envelope": rep.envelope,
                    "bound_ok": rep.bound_ok,
                    "fit": rep.fit.as_ref().map(fit_json),
                    "passed": rep.all_ok(),
                }),
            )?;
            Ok(Outcome::from_pass(rep.all_ok()))
        }
        Check::Exponential => {
            let eta = v.eta.or(pb.strong_convexity()).ok_or_else(|| {
                AppError::Unsupported("verify.eta is required for a problem without a known modulus".into())
            })?;
            let opt = optimum(cfg, &w, &a0)?;
            let rep = verify_exponential_rate(
                &pb,
                &a0,
                &w,
                &v.s_list,
                cfg.flow.tau,
                scheme,
                &fcfg,
                &opt.control,
                opt.cost,
                eta,
            )?;
            sink.json(
                "exponential.json",
                json!({
                    "eta": eta,
                    "J_star": opt.cost,
                    "cost_fit": fit_json(&rep.cost_fit),
                    "control_fit": fit_json(&rep.control_fit),
                    "slopes_ok": rep.slopes_ok,
                    "slopes_agree": rep.slopes_agree,
                    "passed": rep.ok(),
                }),
            )?;
            Ok(Outcome::from_pass(rep.ok()))
        }
        Check::GradVanishing => {
            let rep = verify_gradient_vanishing(&pb, &a0, &w, &v.s_list, cfg.flow.tau, scheme, &fcfg, v.grad_threshold)?;
            let rows: Vec<Vec<f64>> = rep.grad_at.iter().map(|(s, g)| vec![*s, *g]).collect();
            sink.csv("grad_vanishing.csv", &output::table_csv(&["S", "grad_norm_sq"], &rows))?;
            sink.json(
                "grad_vanishing.json",
                json!({
                    "S": rep.grad_at.iter().map(|p| p.0).collect::<Vec<_>>(),
                    "grad_norm_sq": rep.grad_at.iter().map(|p| p.1).collect::<Vec<_>>(),
                    "monotone": rep.monotone,
                    "final_ok": rep.final_ok,
                    "integral": rep.integral,
                    "decrease": rep.decrease,
                    "integral_rel_err": rep.integral_rel_err,
                    "integral_ok": rep.integral_ok,
                    "passed": rep.ok(),
                }),
            )?;
            Ok(Outcome::from_pass(rep.ok()))
        }
        Check::EnergyIdentity => {
            let traj = run_gradient_flow(&pb, &a0, &w, cfg.flow.horizon, cfg.flow.tau, scheme, &fcfg)?;
            let rep = energy_identity_check(&traj)?;
            let pass = rep.max_rel_err.is_none_or(|e| e <= v.energy_tol);
            sink.csv("flow_trace.csv", &output::flow_trace_csv(&traj))?;
            sink.json(
                "energy_identity.json",
                json!({
                    "eligible_nodes": rep.eligible,
                    "no_eligible_nodes": rep.no_eligible_nodes(),
                    "max_rel_err": rep.max_rel_err.unwrap_or(0.0),
                    "worst_s": rep.worst_node.map(|n| traj.s_nodes[n]),
                    "tolerance": v.energy_tol,
                    "passed": pass,
                }),
            )?;
            Ok(Outcome::from_pass(pass))
        }
        Check::GapBound => {
            let basis = cfg.basis();
            let mut rows = Vec::new();
            let mut pass = true;
            for i in 0..v.gap_pairs as u64 {
                let seed = cfg.ensemble.seed.wrapping_mul(1000).wrapping_add(2 * i);
                let beta = random_adapted_control(&w, seed, 0.5);
                let theta = random_adapted_control(&w, seed + 1, 0.5);
                let rep = gap_bound_check(&pb, &w, &basis, &beta, &theta)?;
                pass &= rep.satisfied;
                rows.push(vec![rep.lhs, rep.rhs, rep.stderr, if rep.satisfied { 1.0 } else { 0.0 }]);
            }
            sink.csv("gap_bound.csv", &output::table_csv(&["lhs", "rhs", "stderr", "satisfied"], &rows))?;
            sink.json(
                "gap_bound.json",
                json!({
                    "lhs": rows.iter().map(|r| r[0]).collect::<Vec<_>>(),
                    "rhs": rows.iter().map(|r| r[1]).collect::<Vec<_>>(),
                    "stderr": rows.iter().map(|r| r[2]).collect::<Vec<_>>(),
                    "passed": pass,
                }),
            )?;
            Ok(Outcome::from_pass(pass))
        }
    }
}

/// LSMC adjoint against the analytic linear-quadratic adjoint under the
/// configured affine feedback.
pub fn validate_bsde_cmd(cfg: &RunConfig) -> Result<Outcome, AppError> {
    if cfg.problem.kind != ProblemKind::LqModified {
        return Err(AppError::Unsupported("validate-bsde needs problem.kind = lq_modified".into()));
    }
    let pb = cfg.model()?;
    let params = pb.lq_params().expect("linear-quadratic model");
    let w = cfg.brownian();
    let fb = AffineFeedback {
        gain: cfg.verify.bsde_gain,
        offset: cfg.verify.bsde_offset,
    };
    let (alpha, x) = simulate_closed_loop(&pb, &w, |_, x, a| a[0] = fb.eval(x[0]))?;
    let sol = solve_adjoint_lsmc(&pb, &alpha, &x, &w, &cfg.basis())?;
    let exact = solve_adjoint_lq_analytic(&params, fb, &x, LqOracle::Continuous)?;
    let (ey, ez) = relative_rms(&sol, &exact)?;
    let pass = ey <= cfg.verify.bsde_tol_y && ez <= cfg.verify.bsde_tol_z;
    Sink::new(cfg).json(
        "bsde_validation.json",
        json!({
            "rel_rms_y": ey,
            "rel_rms_z": ez,
            "tol_y": cfg.verify.bsde_tol_y,
            "tol_z": cfg.verify.bsde_tol_z,
            "nodes_outside_validity": exact.diagnostics.nodes_outside_validity,
            "rank_deficient_steps": sol.diagnostics.rank_deficient_steps,
            "passed": pass,
        }),
    )?;
    Ok(Outcome::from_pass(pass))
}
