//! The modified method of successive approximations: forward solve, adjoint
//! solve, proximal control update, repeated until the cost decrement is small.
//!
//! The noise ensemble is shared by every iteration, so cost comparisons are
//! exact differences of the same Monte Carlo estimator. That is what lets the
//! step-size backtracking guarantee a non-increasing cost trace.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::bsde::{solve_adjoint_lsmc, RegressionBasis};
use crate::error::{invalid, Error, Result};
use crate::field::{path_mean_of_time_sum, AdjointSolution, ControlField, StatePaths};
use crate::noise::BrownianEnsemble;
use crate::problem::{ControlProblem, HamiltonianWorkspace};
use crate::prox::{check_tau, update_control, ProxSettings, UpdateMode};
use crate::sde::{path_costs, simulate_forward};
use crate::stats;

/// Backtracking gives up once the step drops below this.
pub const MIN_TAU: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsaConfig {
    pub tau0: f64,
    pub max_outer: usize,
    /// Stop once `0 ≤ J(αⁿ) − J(αⁿ⁺¹) < stop_dj`.
    pub stop_dj: f64,
    pub backtrack: bool,
    pub basis: RegressionBasis,
    pub prox: ProxSettings,
    pub mode: UpdateMode,
}

impl Default for MsaConfig {
    fn default() -> Self {
        Self {
            tau0: 0.2,
            max_outer: 200,
            stop_dj: 1e-6,
            backtrack: true,
            basis: RegressionBasis::default(),
            prox: ProxSettings::default(),
            mode: UpdateMode::Implicit,
        }
    }
}

impl MsaConfig {
    /// Checks the step against the problem: `τ₀ > 0`, and `τ₀ < 1/λ` for the
    /// implicit update when `λ > 0`.
    pub fn validate<P: ControlProblem + ?Sized>(&self, pb: &P) -> Result<()> {
        if !(self.tau0 > 0.0) || !self.tau0.is_finite() {
            return Err(invalid(format!("tau0 must be positive, got {}", self.tau0)));
        }
        if self.mode == UpdateMode::Implicit {
            check_tau(pb, self.tau0)?;
        }
        if self.max_outer == 0 {
            return Err(invalid("max_outer must be at least 1"));
        }
        if self.stop_dj.is_nan() {
            return Err(invalid("stop_dj is NaN"));
        }
        if !(self.prox.tol > 0.0) || self.prox.max_iter == 0 {
            return Err(invalid("prox tolerance and iteration cap must be positive"));
        }
        Ok(())
    }
}

/// One row of a run trace. Row `n` describes the iterate `αⁿ`: its cost, its
/// gradient norm, `‖αⁿ − αⁿ⁻¹‖²` and the step that produced it (`τ₀` and a
/// zero increment for the starting point).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub j: f64,
    pub grad_norm_sq: f64,
    pub step_norm_sq: f64,
    pub tau_used: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// The cost decrement fell below `stop_dj`.
    CostDecrement,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub records: Vec<IterRecord>,
    pub control: ControlField,
    pub termination: Termination,
}

impl RunReport {
    pub fn costs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.j).collect()
    }
}

/// Everything known about one control after a forward and an adjoint solve.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub x: StatePaths,
    pub sol: AdjointSolution,
    pub cost: f64,
    pub cost_stderr: f64,
    pub grad_norm_sq: f64,
}

/// Forward solve, cost, adjoint solve and gradient norm for `α`.
pub fn evaluate<P: ControlProblem + ?Sized>(
    pb: &P,
    alpha: &ControlField,
    w: &BrownianEnsemble,
    basis: &RegressionBasis,
) -> Result<Evaluation> {
    let x = simulate_forward(pb, alpha, w)?;
    evaluate_at(pb, alpha, x, w, basis)
}

fn evaluate_at<P: ControlProblem + ?Sized>(
    pb: &P,
    alpha: &ControlField,
    x: StatePaths,
    w: &BrownianEnsemble,
    basis: &RegressionBasis,
) -> Result<Evaluation> {
    let (cost, cost_stderr) = stats::mean_and_stderr(&path_costs(pb, alpha, &x)?);
    let sol = solve_adjoint_lsmc(pb, alpha, &x, w, basis)?;
    if !sol.all_finite() {
        return Err(Error::NumericalBlowup {
            path: 0,
            step: 0,
            what: "adjoint solution is not finite".into(),
        });
    }
    let grad_norm_sq = grad_norm_estimator(pb, alpha, &x, &sol)?;
    Ok(Evaluation {
        x,
        sol,
        cost,
        cost_stderr,
        grad_norm_sq,
    })
}

fn check_consistent(alpha: &ControlField, x: &StatePaths, sol: &AdjointSolution) -> Result<()> {
    if alpha.shape() != x.shape()
        || alpha.shape() != sol.shape()
        || alpha.grid() != x.grid()
        || alpha.grid() != sol.grid()
    {
        return Err(invalid("control, state paths and adjoint differ in shape or grid"));
    }
    Ok(())
}

/// `D_a H(t_k, X_k, Ŷ_k, Z_k, α_k)` at every path and step.
pub fn gradient_field<P: ControlProblem + ?Sized>(
    pb: &P,
    alpha: &ControlField,
    x: &StatePaths,
    sol: &AdjointSolution,
) -> Result<ControlField> {
    check_consistent(alpha, x, sol)?;
    let grid = *alpha.grid();
    let mut ham = HamiltonianWorkspace::new(pb.dims());
    let mut out = ControlField::zeros(*alpha.shape(), grid);
    for k in 0..grid.n_steps() {
        for path in 0..alpha.shape().total_paths() {
            let t = grid.time(k);
            ham.grad_a(
                pb,
                t,
                x.at(path, k),
                sol.y_next(path, k),
                sol.z(path, k),
                alpha.at(path, k),
                out.at_mut(path, k),
            );
        }
    }
    Ok(out)
}

/// Estimator of `‖D_a H‖²`: mean over evaluation paths of
/// `Σ_k |D_a H(t_k, X_k, Ŷ_k, Z_k, α_k)|² dt`.
pub fn grad_norm_estimator<P: ControlProblem + ?Sized>(
    pb: &P,
    alpha: &ControlField,
    x: &StatePaths,
    sol: &AdjointSolution,
) -> Result<f64> {
    check_consistent(alpha, x, sol)?;
    let grid = *alpha.grid();
    let mut ham = HamiltonianWorkspace::new(pb.dims());
    let mut g = vec![0.0; alpha.shape().p];
    Ok(path_mean_of_time_sum(
        alpha.shape().n_paths,
        grid.n_steps(),
        grid.dt(),
        |path, k| {
            ham.grad_a(
                pb,
                grid.time(k),
                x.at(path, k),
                sol.y_next(path, k),
                sol.z(path, k),
                alpha.at(path, k),
                &mut g,
            );
            g.iter().map(|v| v * v).sum()
        },
    ))
}

/// Runs the successive-approximation loop from `α0`.
///
/// Each outer iteration solves the adjoint at `αⁿ` and applies the pointwise
/// update with step `τ₀`. With backtracking on, a candidate whose cost
/// exceeds `J(αⁿ)` is discarded and the update is redone from `αⁿ` with half
/// the step; the adjoint is not re-solved because it only depends on `αⁿ`.
pub fn run_msa<P: ControlProblem + ?Sized>(
    pb: &P,
    alpha0: &ControlField,
    w: &BrownianEnsemble,
    cfg: &MsaConfig,
) -> Result<RunReport> {
    cfg.validate(pb)?;
    if alpha0.shape() != w.shape() || alpha0.grid() != w.grid() {
        return Err(invalid("initial control and Brownian ensemble differ in shape or grid"));
    }
    let mut alpha = alpha0.clone();
    let mut cur = evaluate(pb, &alpha, w, &cfg.basis)?;
    let mut records = vec![IterRecord {
        iter: 0,
        j: cur.cost,
        grad_norm_sq: cur.grad_norm_sq,
        step_norm_sq: 0.0,
        tau_used: cfg.tau0,
    }];
    let mut termination = Termination::MaxIterations;
    for iter in 1..=cfg.max_outer {
        let mut tau = cfg.tau0;
        let (cand, x_cand, j_cand) = loop {
            let cand = update_control(pb, &alpha, &cur.x, &cur.sol, tau, cfg.mode, cfg.prox)?;
            let x_cand = simulate_forward(pb, &cand, w)?;
            let j_cand = stats::mean(&path_costs(pb, &cand, &x_cand)?);
            if !j_cand.is_finite() {
                return Err(Error::NumericalBlowup {
                    path: 0,
                    step: 0,
                    what: format!("cost is not finite at iteration {iter}"),
                });
            }
            if !cfg.backtrack || j_cand <= cur.cost {
                break (cand, x_cand, j_cand);
            }
            tau *= 0.5;
            if tau < MIN_TAU {
                return Err(Error::Stalled {
                    iteration: iter,
                    tau,
                    increase: j_cand - cur.cost,
                });
            }
        };
        let step_norm_sq = crate::field::control_norm_sq(&cand.sub(&alpha)?);
        let next = evaluate_at(pb, &cand, x_cand, w, &cfg.basis)?;
        let decrement = cur.cost - j_cand;
        records.push(IterRecord {
            iter,
            j: next.cost,
            grad_norm_sq: next.grad_norm_sq,
            step_norm_sq,
            tau_used: tau,
        });
        alpha = cand;
        cur = next;
        if decrement >= 0.0 && decrement < cfg.stop_dj {
            termination = Termination::CostDecrement;
            break;
        }
    }
    Ok(RunReport {
        records,
        control: alpha,
        termination,
    })
}

/// Central difference of `J` along `v` against the adjoint prediction
/// `E ∫ D_a H · v dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateauxReport {
    pub finite_difference: f64,
    pub adjoint: f64,
    /// Standard error of the pathwise difference of the two estimators.
    pub stderr: f64,
    /// `max(1e-3, 3·stderr)`.
    pub tolerance: f64,
    pub ok: bool,
}

/// Compares `(J(α + εv) − J(α − εv))/(2ε)` with `E Σ_k D_a H · v_k dt`, both
/// on the same noise.
pub fn gateaux_check<P: ControlProblem + ?Sized>(
    pb: &P,
    alpha: &ControlField,
    v: &ControlField,
    w: &BrownianEnsemble,
    basis: &RegressionBasis,
    eps: f64,
) -> Result<GateauxReport> {
    if !(eps > 0.0) {
        return Err(invalid(format!("eps must be positive, got {eps}")));
    }
    let base = evaluate(pb, alpha, w, basis)?;
    let grad = gradient_field(pb, alpha, &base.x, &base.sol)?;
    let plus = alpha.add_scaled(v, eps)?;
    let minus = alpha.add_scaled(v, -eps)?;
    let cp = path_costs(pb, &plus, &simulate_forward(pb, &plus, w)?)?;
    let cm = path_costs(pb, &minus, &simulate_forward(pb, &minus, w)?)?;
    let grid = *alpha.grid();
    let dt = grid.dt();
    let n_paths = alpha.shape().n_paths;
    let mut fd = Vec::with_capacity(n_paths);
    let mut adj = Vec::with_capacity(n_paths);
    let mut diff = Vec::with_capacity(n_paths);
    for path in 0..n_paths {
        let f = (cp[path] - cm[path]) / (2.0 * eps);
        let mut s = 0.0;
        for k in 0..grid.n_steps() {
            s += grad
                .at(path, k)
                .iter()
                .zip(v.at(path, k))
                .map(|(g, vi)| g * vi)
                .sum::<f64>();
        }
        let a = s * dt;
        fd.push(f);
        adj.push(a);
        diff.push(f - a);
    }
    let finite_difference = stats::mean(&fd);
    let adjoint = stats::mean(&adj);
    let (_, stderr) = stats::mean_and_stderr(&diff);
    let tolerance = (3.0 * stderr).max(1e-3);
    Ok(GateauxReport {
        finite_difference,
        adjoint,
        stderr,
        tolerance,
        ok: (finite_difference - adjoint).abs() <= tolerance,
    })
}

/// Fit of the per-iteration inequality
/// `J(αⁿ) − J(αⁿ⁺¹) ≥ (1/(2τ) − C)‖αⁿ⁺¹ − αⁿ‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct DescentFit {
    /// Smallest `C` satisfying the inequality on the fitted iterations.
    pub c: f64,
    /// Largest shortfall on the held-out iterations, as a fraction of the
    /// `1/(2τ)` coefficient. Zero when none falls short.
    pub worst_excess: f64,
    pub fitted: usize,
    pub held_out: usize,
}

/// Fits `C` on the first half of the informative iterations and measures the
/// other half against it. Iterations whose increment is below `min_step_sq`
/// carry no information about `C` and are skipped.
pub fn fit_descent_constant(records: &[IterRecord], min_step_sq: f64) -> Result<DescentFit> {
    let mut needed = Vec::new();
    for pair in records.windows(2) {
        let (prev, next) = (pair[0], pair[1]);
        if next.step_norm_sq <= min_step_sq {
            continue;
        }
        let coef = 1.0 / (2.0 * next.tau_used);
        let c_n = coef - (prev.j - next.j) / next.step_norm_sq;
        needed.push((c_n, coef));
    }
    if needed.len() < 2 {
        return Err(invalid("need at least two informative iterations"));
    }
    let split = needed.len().div_ceil(2);
    let c = needed[..split]
        .iter()
        .map(|v| v.0)
        .fold(f64::NEG_INFINITY, f64::max);
    let worst_excess = needed[split..]
        .iter()
        .map(|&(c_n, coef)| ((c_n - c) / coef).max(0.0))
        .fold(0.0, f64::max);
    Ok(DescentFit {
        c,
        worst_excess,
        fitted: split,
        held_out: needed.len() - split,
    })
}
