//! Pointwise control updates.
//!
//! The implicit step minimizes `H(t,x,y,z,a) + |a − a_prev|²/(2τ)`, i.e. it
//! solves `D_a H(a) + (a − a_prev)/τ = 0`, by damped Newton with Jacobian
//! `D²_a H + I/τ`. When `D²_a H` is constant the first Newton step is the
//! closed-form minimizer.
//! The explicit step is `a_prev − τ D_a H(a_prev)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::field::{AdjointSolution, ControlField, StatePaths};
use crate::linalg;
use crate::problem::{ControlProblem, HamiltonianWorkspace};

/// Newton tolerance on `|D_a H(a) + (a − a_prev)/τ|` and iteration cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ProxSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    Implicit,
    Explicit,
}

/// Halvings tried before a Newton step is declared a failure.
const MAX_HALVINGS: usize = 20;

/// Checks `τ < 1/λ`, which makes the proximal objective strongly convex.
pub fn check_tau<P: ControlProblem + ?Sized>(pb: &P, tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(invalid(format!("step size must be positive, got {tau}")));
    }
    let lam = pb.lambda_hint();
    if lam > 0.0 && tau * lam >= 1.0 {
        return Err(invalid(format!(
            "step size {tau} violates tau < 1/lambda = {}",
            1.0 / lam
        )));
    }
    Ok(())
}

/// Scratch space for repeated pointwise updates.
#[derive(Debug, Clone)]
pub struct ProxWorkspace {
    ham: HamiltonianWorkspace,
    hess: Vec<f64>,
    resid: Vec<f64>,
    trial: Vec<f64>,
    trial_resid: Vec<f64>,
    step: Vec<f64>,
}

impl ProxWorkspace {
    pub fn new<P: ControlProblem + ?Sized>(pb: &P) -> Self {
        let dims = pb.dims();
        let p = dims.p;
        Self {
            ham: HamiltonianWorkspace::new(dims),
            hess: vec![0.0; p * p],
            resid: vec![0.0; p],
            trial: vec![0.0; p],
            trial_resid: vec![0.0; p],
            step: vec![0.0; p],
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

#[allow(clippy::too_many_arguments)]
fn residual<P: ControlProblem + ?Sized>(
    pb: &P,
    ham: &mut HamiltonianWorkspace,
    t: f64,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    a: &[f64],
    a_prev: &[f64],
    tau: f64,
    out: &mut [f64],
) -> f64 {
    ham.grad_a(pb, t, x, y, z, a, out);
    for ((o, ai), pi) in out.iter_mut().zip(a).zip(a_prev) {
        *o += (ai - pi) / tau;
    }
    norm(out)
}

#[allow(clippy::too_many_arguments)]
fn objective<P: ControlProblem + ?Sized>(
    pb: &P,
    ham: &mut HamiltonianWorkspace,
    t: f64,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    a: &[f64],
    a_prev: &[f64],
    tau: f64,
) -> f64 {
    let d2: f64 = a.iter().zip(a_prev).map(|(u, v)| (u - v) * (u - v)).sum();
    ham.value(pb, t, x, y, z, a) + d2 / (2.0 * tau)
}

/// Damped Newton solve writing the result into `a`. A step is accepted when
/// it lowers the residual norm or, failing that, satisfies an Armijo decrease
/// of the proximal objective; the latter carries iterates across points where
/// `D_a H` jumps. `visit` sees every Newton matrix `D²_a H + I/τ` that is
/// factored.
#[allow(clippy::too_many_arguments)]
pub(crate) fn prox_solve<P, V>(
    pb: &P,
    ws: &mut ProxWorkspace,
    t: f64,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    a_prev: &[f64],
    tau: f64,
    settings: ProxSettings,
    a: &mut [f64],
    mut visit: V,
) -> Result<()>
where
    P: ControlProblem + ?Sized,
    V: FnMut(&[f64]),
{
    let p = a_prev.len();
    a.copy_from_slice(a_prev);
    let mut r = residual(pb, &mut ws.ham, t, x, y, z, a, a_prev, tau, &mut ws.resid);
    for _ in 0..settings.max_iter {
        if r <= settings.tol {
            return Ok(());
        }
        ws.ham.hess_a(pb, t, x, y, a, &mut ws.hess);
        for i in 0..p {
            ws.hess[i * p + i] += 1.0 / tau;
        }
        visit(&ws.hess);
        for (s, g) in ws.step.iter_mut().zip(&ws.resid) {
            *s = -g;
        }
        if !linalg::solve_dense(&mut ws.hess, p, &mut ws.step) {
            break;
        }
        // converged to rounding level: with a small τ the residual carries
        // (a − a_prev)/τ, which magnifies the last ulp of `a`
        if norm(&ws.step) <= 4.0 * f64::EPSILON * (1.0 + norm(a)) {
            return Ok(());
        }
        // Φ'(a)·δ for the proximal objective Φ; negative since the Newton
        // matrix is positive definite for τ < 1/λ.
        let slope: f64 = ws.resid.iter().zip(&ws.step).map(|(g, s)| g * s).sum();
        let phi = objective(pb, &mut ws.ham, t, x, y, z, a, a_prev, tau);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            for ((tr, ai), si) in ws.trial.iter_mut().zip(a.iter()).zip(&ws.step) {
                *tr = ai + scale * si;
            }
            let rt = residual(pb, &mut ws.ham, t, x, y, z, &ws.trial, a_prev, tau, &mut ws.trial_resid);
            let descent = slope < 0.0
                && objective(pb, &mut ws.ham, t, x, y, z, &ws.trial, a_prev, tau)
                    <= phi + 1e-4 * scale * slope;
            if rt < r || descent {
                a.copy_from_slice(&ws.trial);
                ws.resid.copy_from_slice(&ws.trial_resid);
                r = rt;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if r <= settings.tol {
        return Ok(());
    }
    Err(Error::ConvergenceFailure {
        t,
        x: x.to_vec(),
        residual: r,
    })
}

/// `argmin_a H(t,x,y,z,a) + |a − a_prev|²/(2τ)`.
#[allow(clippy::too_many_arguments)]
pub fn prox_step_point<P: ControlProblem + ?Sized>(
    pb: &P,
    t: f64,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    a_prev: &[f64],
    tau: f64,
    settings: ProxSettings,
) -> Result<Vec<f64>> {
    check_tau(pb, tau)?;
    let mut ws = ProxWorkspace::new(pb);
    let mut a = vec![0.0; a_prev.len()];
    prox_solve(pb, &mut ws, t, x, y, z, a_prev, tau, settings, &mut a, |_| {})?;
    Ok(a)
}

/// `a_prev − τ D_a H(t, x, y, z, a_prev)`.
pub fn explicit_step_point<P: ControlProblem + ?Sized>(
    pb: &P,
    t: f64,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    a_prev: &[f64],
    tau: f64,
) -> Vec<f64> {
    let mut ham = HamiltonianWorkspace::new(pb.dims());
    let mut g = vec![0.0; a_prev.len()];
    ham.grad_a(pb, t, x, y, z, a_prev, &mut g);
    a_prev.iter().zip(&g).map(|(a, gi)| a - tau * gi).collect()
}

/// Failed points listed in an [`Error::UpdateFailed`].
const MAX_REPORTED: usize = 10;

/// Applies the pointwise step at every `(path, step)` with
/// `(X_k, Ŷ_k, Z_k, α_k)`, where `Ŷ_k` is the conditional mean of `Y_{k+1}`
/// (see [`AdjointSolution::y_next`]).
pub fn update_control<P: ControlProblem + ?Sized>(
    pb: &P,
    alpha_prev: &ControlField,
    x: &StatePaths,
    sol: &AdjointSolution,
    tau: f64,
    mode: UpdateMode,
    settings: ProxSettings,
) -> Result<ControlField> {
    if alpha_prev.shape() != x.shape()
        || alpha_prev.shape() != sol.shape()
        || alpha_prev.grid() != x.grid()
        || alpha_prev.grid() != sol.grid()
    {
        return Err(invalid("control, state paths and adjoint differ in shape or grid"));
    }
    match mode {
        UpdateMode::Implicit => check_tau(pb, tau)?,
        UpdateMode::Explicit => {
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(invalid(format!("step size must be positive, got {tau}")));
            }
        }
    }
    let shape = *alpha_prev.shape();
    let grid = *alpha_prev.grid();
    let mut out = alpha_prev.clone();
    let mut ws = ProxWorkspace::new(pb);
    let mut grad = vec![0.0; shape.p];
    let mut failures = Vec::new();
    let mut count = 0usize;
    let mut first = None;
    for k in 0..grid.n_steps() {
        for path in 0..shape.total_paths() {
            let t = grid.time(k);
            let (xk, yk, zk) = (x.at(path, k), sol.y_next(path, k), sol.z(path, k));
            let a_prev = alpha_prev.at(path, k);
            match mode {
                UpdateMode::Explicit => {
                    ws.ham.grad_a(pb, t, xk, yk, zk, a_prev, &mut grad);
                    for ((o, a), g) in out.at_mut(path, k).iter_mut().zip(a_prev).zip(&grad) {
                        *o = a - tau * g;
                    }
                }
                UpdateMode::Implicit => {
                    let res = prox_solve(
                        pb,
                        &mut ws,
                        t,
                        xk,
                        yk,
                        zk,
                        a_prev,
                        tau,
                        settings,
                        out.at_mut(path, k),
                        |_| {},
                    );
                    if let Err(e) = res {
                        count += 1;
                        if failures.len() < MAX_REPORTED {
                            failures.push((path, k));
                        }
                        first.get_or_insert(e);
                    }
                }
            }
        }
    }
    if let Some(first) = first {
        return Err(Error::UpdateFailed {
            count,
            points: failures,
            first: alloc::boxed::Box::new(first),
        });
    }
    Ok(out)
}
