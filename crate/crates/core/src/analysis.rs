//! Rate fitting and executable convergence checks.
//!
//! Every driver here runs on one Brownian ensemble end to end, so differences
//! between runs are pathwise and their standard errors are small.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::field::{control_distance, ControlField};
use crate::flow::{run_gradient_flow, FlowConfig, FlowTrajectory, Interpolant, StorePolicy};
use crate::msa::evaluate;
use crate::noise::BrownianEnsemble;
use crate::problem::ControlProblem;
use crate::prox::{update_control, UpdateMode};
use crate::sde::{path_costs, simulate_forward};
use crate::stats;

/// Least-squares line through `(log scale, log error)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub pairs: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

fn check_pairs(pairs: &[(f64, f64)], positive_scale: bool) -> Result<()> {
    if pairs.len() < 3 {
        return Err(invalid(format!("rate fit needs at least 3 pairs, got {}", pairs.len())));
    }
    for &(s, e) in pairs {
        let scale_ok = s.is_finite() && (!positive_scale || s > 0.0);
        if !scale_ok || !(e > 0.0) || !e.is_finite() {
            return Err(invalid(format!("rate fit needs positive finite pairs, got ({s}, {e})")));
        }
    }
    Ok(())
}

fn least_squares(pairs: &[(f64, f64)], xs: Vec<f64>, ys: Vec<f64>) -> Result<RateFit> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 {
        return Err(invalid("rate fit needs at least two distinct scales"));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(RateFit {
        pairs: pairs.to_vec(),
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}

/// Fits `log e = intercept + slope · log s` over `≥ 3` positive pairs.
pub fn fit_rate(pairs: &[(f64, f64)]) -> Result<RateFit> {
    check_pairs(pairs, true)?;
    let (lx, ly) = pairs.iter().map(|&(s, e)| (libm::log(s), libm::log(e))).unzip();
    least_squares(pairs, lx, ly)
}

/// Fits `log e = intercept + slope · s`, the exponential-decay counterpart
/// of [`fit_rate`]. Scales may be zero or negative here.
pub fn fit_exponential(pairs: &[(f64, f64)]) -> Result<RateFit> {
    check_pairs(pairs, false)?;
    let (x, ly) = pairs.iter().map(|&(s, e)| (s, libm::log(e))).unzip();
    least_squares(pairs, x, ly)
}

/// Random adapted control `c0 + c1·t + c2·W_t` per component, with standard
/// normal coefficients drawn from `seed` and scaled by `scale`. Component
/// `i` uses Brownian component `i mod d_w`.
pub fn random_adapted_control(w: &BrownianEnsemble, seed: u64, scale: f64) -> ControlField {
    let shape = *w.shape();
    let mut rng = crate::rng::Stream::new(seed, 13);
    let coef: Vec<[f64; 3]> = (0..shape.p).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect();
    let dt = w.grid().dt();
    ControlField::from_fn(shape, *w.grid(), |path, k, out| {
        let wk = w.value_at(path, k);
        for (i, c) in coef.iter().enumerate() {
            out[i] = scale * (c[0] + c[1] * (k as f64 * dt) + c[2] * wk[i % shape.d_w]);
        }
    })
}

/// Error of one discrete flow against the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct TauRateReport {
    /// `(τ, sup_s ‖α̂ − α‖ + ‖α⁺ − α‖ + ‖α⁻ − α‖)` in the order given.
    pub errors: Vec<(f64, f64)>,
    pub fit: RateFit,
    /// Step of the reference flow, `None` when an exact flow was supplied.
    pub tau_ref: Option<f64>,
}

fn check_tau_list(tau_list: &[f64]) -> Result<f64> {
    if tau_list.len() < 3 {
        return Err(invalid(format!("tau-rate check needs at least 3 steps, got {}", tau_list.len())));
    }
    let mut tau_min = f64::INFINITY;
    for &t in tau_list {
        if !(t > 0.0) || !t.is_finite() {
            return Err(invalid(format!("flow steps must be positive, got {t}")));
        }
        tau_min = tau_min.min(t);
    }
    Ok(tau_min)
}

fn flow_steps(horizon: f64, tau: f64) -> usize {
    (libm::ceil(horizon / tau - 1e-9) as usize).max(1)
}

/// Multiples of `τ_min/2`. Within a step `‖α⁺ − α‖ + ‖α⁻ − α‖` is close to
/// `τ‖α'‖` wherever the point falls, so the sampling does not bias the fit.
fn half_step_points(horizon: f64, n_min: usize) -> Vec<f64> {
    (0..=2 * n_min).map(|j| j as f64 * horizon / (2 * n_min) as f64).collect()
}

fn interpolant_error(traj: &FlowTrajectory, s: f64, reference: &ControlField) -> Result<f64> {
    let mut err = 0.0;
    for mode in [Interpolant::Linear, Interpolant::Plus, Interpolant::Minus] {
        err += control_distance(&traj.interpolate(s, mode)?, reference)?;
    }
    Ok(err)
}

fn tau_errors(
    runs: &[(f64, FlowTrajectory)],
    points: &[f64],
    mut reference: impl FnMut(usize) -> Result<ControlField>,
) -> Result<Vec<(f64, f64)>> {
    let mut errors: Vec<(f64, f64)> = runs.iter().map(|(t, _)| (*t, 0.0)).collect();
    for (j, &s) in points.iter().enumerate() {
        let r = reference(j)?;
        for ((_, traj), (_, e)) in runs.iter().zip(errors.iter_mut()) {
            *e = e.max(interpolant_error(traj, s, &r)?);
        }
    }
    Ok(errors)
}

fn implicit_runs<P: ControlProblem + ?Sized>(
    pb: &P,
    alpha0: &ControlField,
    w: &BrownianEnsemble,
    horizon: f64,
    tau_list: &[f64],
    cfg: &FlowConfig,
) -> Result<Vec<(f64, FlowTrajectory)>> {
    let keep_all = FlowConfig {
        store: StorePolicy::Every(1),
        ..*cfg
    };
    tau_list
        .iter()
        .map(|&t| Ok((t, run_gradient_flow(pb, alpha0, w, horizon, t, UpdateMode::Implicit, &keep_all)?)))
        .collect()
}

/// Measures the first-order convergence of the implicit scheme in `τ`.
///
/// The limit flow is approximated by the explicit scheme at
/// `τ_ref = τ_min/16`. Errors are taken at every multiple of `τ_min/2` in
/// `[0, S]`, which puts points inside every step of every run.
pub fn verify_tau_rate<P: ControlProblem + ?Sized>(
    pb: &P,
    alpha0: &ControlField,
    w: &BrownianEnsemble,
    horizon: f64,
    tau_list: &[f64],
    cfg: &FlowConfig,
) -> Result<TauRateReport> {
    let tau_min = check_tau_list(tau_list)?;
    let n_min = flow_steps(horizon, tau_min);
    let tau_ref = horizon / (16 * n_min) as f64;
    let reference = run_gradient_flow(
        pb,
        alpha0,
        w,
        horizon,
        tau_ref,
        UpdateMode::Explicit,
        &FlowConfig {
            store: StorePolicy::Every(8),
            ..*cfg
        },
    )?;
    let runs = implicit_runs(pb, alpha0, w, horizon, tau_list, cfg)?;
    let points = half_step_points(horizon, n_min);
    let errors = tau_errors(&runs, &points, |j| {
        reference
            .control_at_node(8 * j)
            .cloned()
            .ok_or_else(|| invalid("reference node missing"))
    })?;
    Ok(TauRateReport {
        fit: fit_rate(&errors)?,
        errors,
        tau_ref: Some(tau_ref),
    })
}

/// [`verify_tau_rate`] against a known flow `s ↦ α_s`, on the same
/// evaluation points.
pub fn verify_tau_rate_exact<P: ControlProblem + ?Sized>(
    pb: &P,
    alpha0: &ControlField,
    w: &BrownianEnsemble,
    horizon: f64,
    tau_list: &[f64],
    cfg: &FlowConfig,
    exact: impl Fn(f64) -> Result<ControlField>,
) -> Result<TauRateReport> {
    let n_min = flow_steps(horizon, check_tau_list(tau_list)?);
    let runs = implicit_runs(pb, alpha0, w, horizon, tau_list, cfg)?;
    let s = half_step_points(horizon, n_min);
    let errors = tau_errors(&runs, &s, |j| exact(s[j]))?;
    Ok(TauRateReport {
        fit: fit_rate(&errors)?,
        errors,
        tau_ref: None,
    })
}

/// Stationary point of the sampled problem used as `α*` in the rate checks.
#[derive(Debug, Clone)]
pub struct ReferenceOptimum {
    pub control: ControlField,
    pub cost: f64,
    pub grad_norm_sq: f64,
    pub iterations: usize,
}

/// Iterates the implicit update with a fixed step `τ` from `α0` until the
/// relative cost decrement drops below `rel_tol`, the cost stops decreasing
/// or `max_iter` is reached, and returns the best iterate.
///
/// Fixed points of the update are the zeros of `D_a H` whatever the step,
/// so a large `τ` reaches the same point as a long flow in far fewer solves.
pub fn reference_optimum<P: ControlProblem + ?Sized>(
    pb: &P,
    alpha0: &ControlField,
    w: &BrownianEnsemble,
    tau: f64,
    max_iter: usize,
    rel_tol: f64,
    cfg: &FlowConfig,
) -> Result<ReferenceOptimum> {
    crate::prox::check_tau(pb, tau)?;
    let mut alpha = alpha0.clone();
    let mut ev = evaluate(pb, &alpha, w, &cfg.basis)?;
    let mut iterations = 0;
    while iterations < max_iter {
        let next = update_control(pb, &alpha, &ev.x, &ev.sol, tau, UpdateMode::Implicit, cfg.prox)?;
        let next_ev = evaluate(pb, &next, w, &cfg.basis)?;
        if next_ev.cost > ev.cost {
            break;
        }
        let drop = ev.cost - next_ev.cost;
        alpha = next;
        ev = next_ev;
        iterations += 1;
        if drop <= rel_tol * (1.0 + ev.cost.abs()) {
            break;
        }
    }
    Ok(ReferenceOptimum {
        control: alpha,
        cost: ev.cost,
        grad_norm_sq: ev.grad_norm_sq,
        iterations,
    })
}

/// Flow times in `s_list` must be positive, increasing and land on nodes of
/// the `τ` grid.
fn node_indices(s_list: &[f64], tau: f64) -> Result<Vec<usize>> {
    if s_list.is_empty() {
        return Err(invalid("need at least one flow time"));
    }
    let mut out: Vec<usize> = Vec::with_capacity(s_list.len());
    for &s in s_list {
        let x = s / tau;
        let n = libm::round(x);
        if !(s > 0.0) || (x - n).abs() > 1e-9 * x.max(1.0) {
            return Err(invalid(format!("flow time {s} is not a positive multiple of tau = {tau}")));
        }
        let n = n as usize;
        if out.last().is_some_and(|&m| m >= n) {
            return Err(invalid("flow times must be increasing"));
        }
        out.push(n);
    }
    Ok(out)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// One flow run to `max(s_list)` that keeps the controls at every `s` in
/// `s_list`. The returned indices locate those nodes.
fn flow_through<P: ControlProblem + ?Sized>(
    pb: &P,
    alpha0: &ControlField,
    w: &BrownianEnsemble,
    s_list: &[f64],
    tau: f64,
    scheme: UpdateMode,
    cfg: &FlowConfig,
) -> Result<(FlowTrajectory, Vec<usize>)> {
    let nodes = node_indices(s_list, tau)?;
    let stride = nodes.iter().fold(0, |g, &n| gcd(g, n));
    let horizon = *nodes.last().unwrap() as f64 * tau;
    let traj = run_gradient_flow(
        pb,
        alpha0,
        w,
        horizon,
        tau,
        scheme,
        &FlowConfig {
            store: StorePolicy::Every(stride),
            ..*cfg
        },
    )?;
    Ok((traj, nodes))
}

fn costs_on<P: ControlProblem + ?Sized>(pb: &P, alpha: &ControlField, w: &BrownianEnsemble) -> Result<Vec<f64>> {
    path_costs(pb, alpha, &simulate_forward(pb, alpha, w)?)
}

/// Cost gap to the reference optimum at one flow time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapAtS {
    pub s: f64,
    /// `J(α_s) − J*`.
    pub gap: f64,
    /// Standard error of the pathwise cost difference.
    pub stderr: f64,
    /// `‖α_s − α*‖²`.
    pub control_gap_sq: f64,
}

fn gaps_along<P: ControlProblem + ?Sized>(
    pb: &P,
    w: &BrownianEnsemble,
    traj: &FlowTrajectory,
    nodes: &[usize],
    s_list: &[f64],
    alpha_star: &ControlField,
) -> Result<Vec<GapAtS>> {
    let star_costs = costs_on(pb, alpha_star, w)?;
    let mut out = Vec::with_capacity(nodes.len());
    for (&n, &s) in nodes.iter().zip(s_list) {
        let alpha = traj
            .control_at_node(n)
            .ok_or_else(|| invalid("flow node missing"))?;
        let diff: Vec<f64> = costs_on(pb, alpha, w)?
            .iter()
            .zip(&star_costs)
            .map(|(a, b)| a - b)
            .collect();
        let (gap, stderr) = stats::mean_and_stderr(&diff);
        let d = control_distance(alpha, alpha_star)?;
        out.push(GapAtS {
            s,
            gap,
            stderr,
            control_gap_sq: d * d,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SublinearReport {
    pub gaps: Vec<GapAtS>,
    /// `‖α0 − α*‖² / S` at each `S`.
    pub envelope: Vec<f64>,
    /// `gap ≤ envelope + 3·stderr` at each `S`.
    pub bound_ok: Vec<bool>,
    /// Fit of the gap against `S`, when at least three gaps are positive.
    pub fit: Option<RateFit>,
}

impl SublinearReport {
    pub fn all_ok(&self) -> bool {
        self.bound_ok.iter().all(|&b| b)
    }
}

/// Checks `J(α_S) − J* ≤ ‖α0 − α*‖²/S` along one flow run.
///
/// `j_star` is accepted for reporting symmetry with the other drivers but
/// the gaps are computed pathwise against `α*` on `w`, which is the sharper
/// estimate when `J*` was itself estimated on `w`.
#[allow(clippy::too_many_arguments)]
pub fn verify_sublinear_rate<P: ControlProblem + ?Sized>(
    pb: &P,
    alpha0: &ControlField,
    w: &BrownianEnsemble,
    s_list: &[f64],
    tau: f64,
    scheme: UpdateMode,
    cfg: &FlowConfig,
    alpha_star: &ControlField,
) -> Result<SublinearReport> {
    let (traj, nodes) = flow_through(pb, alpha0, w, s_list, tau, scheme, cfg)?;
    let gaps = gaps_along(pb, w, &traj, &nodes, s_list, alpha_star)?;
    let d0 = control_distance(alpha0, alpha_star)?;
    let envelope: Vec<f64> = s_list.iter().map(|s| d0 * d0 / s).collect();
    let bound_ok = gaps
        .iter()
        .zip(&envelope)
        .map(|(g, e)| g.gap <= e + 3.0 * g.stderr)
        .collect();
    let positive: Vec<(f64, f64)> = gaps.iter().filter(|g| g.gap > 0.0).map(|g| (g.s, g.gap)).collect();
    Ok(SublinearReport {
        gaps,
        envelope,
        bound_ok,
        fit: fit_rate(&positive).ok(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExponentialReport {
    pub eta: f64,
    pub gaps: Vec<GapAtS>,
    /// `log(J(α_S) − J*)` against `S`.
    pub cost_fit: RateFit,
    /// `log ‖α_S − α*‖²` against `S`.
    pub control_fit: RateFit,
    /// Both slopes are at most `−0.7 η`.
    pub slopes_ok: bool,
    /// The two slopes differ by at most 30% of the larger one.
    pub slopes_agree: bool,
}

impl ExponentialReport {
    pub fn ok(&self) -> bool {
        self.slopes_ok && self.slopes_agree
    }
}

/// Fits the decay of both gap measures against `S` for a problem that is
/// `η`-strongly convex in the control.
#[allow(clippy::too_many_arguments)]
pub fn verify_exponential_rate<P: ControlProblem + ?Sized>(
    pb: &P,
    alpha0: &ControlField,
    w: &BrownianEnsemble,
    s_list: &[f64],
    tau: f64,
    scheme: UpdateMode,
    cfg: &FlowConfig,
    alpha_star: &ControlField,
    j_star: f64,
    eta: f64,
) -> Result<ExponentialReport> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(invalid(format!("strong convexity modulus must be positive, got {eta}")));
    }
    let (traj, nodes) = flow_through(pb, alpha0, w, s_list, tau, scheme, cfg)?;
    let gaps = gaps_along(pb, w, &traj, &nodes, s_list, alpha_star)?;
    let cost_pairs: Vec<(f64, f64)> = nodes.iter().zip(s_list).map(|(&n, &s)| (s, traj.j_trace[n] - j_star)).collect();
    let control_pairs: Vec<(f64, f64)> = gaps.iter().map(|g| (g.s, g.control_gap_sq)).collect();
    let cost_fit = fit_exponential(&cost_pairs)?;
    let control_fit = fit_exponential(&control_pairs)?;
    let (a, b) = (cost_fit.slope, control_fit.slope);
    Ok(ExponentialReport {
        eta,
        gaps,
        slopes_ok: a <= -0.7 * eta && b <= -0.7 * eta,
        slopes_agree: (a - b).abs() <= 0.3 * a.abs().max(b.abs()),
        cost_fit,
        control_fit,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradVanishingReport {
    /// `(S, ‖D_a H(α_S)‖²)`.
    pub grad_at: Vec<(f64, f64)>,
    /// The values in `grad_at` never increase.
    pub monotone: bool,
    pub final_ok: bool,
    /// Trapezoidal `∫₀^S ‖D_a H‖² ds` over the whole run.
    pub integral: f64,
    /// `J(α0) − min_s J(α_s)`.
    pub decrease: f64,
    pub integral_rel_err: f64,
    pub integral_ok: bool,
}

impl GradVanishingReport {
    pub fn ok(&self) -> bool {
        self.final_ok && self.integral_ok
    }
}

/// Runs the flow to `max(s_list)` and checks that the gradient norm decays
/// below `threshold` and that its time integral matches the cost decrease
/// to 10%.
#[allow(clippy::too_many_arguments)]
pub fn verify_gradient_vanishing<P: ControlProblem + ?Sized>(
    pb: &P,
    alpha0: &ControlField,
    w: &BrownianEnsemble,
    s_list: &[f64],
    tau: f64,
    scheme: UpdateMode,
    cfg: &FlowConfig,
    threshold: f64,
) -> Result<GradVanishingReport> {
    let (traj, nodes) = flow_through(pb, alpha0, w, s_list, tau, scheme, cfg)?;
    Ok(grad_vanishing_from(&traj, &nodes, threshold))
}

fn grad_vanishing_from(traj: &FlowTrajectory, nodes: &[usize], threshold: f64) -> GradVanishingReport {
    let g = &traj.grad_norm_sq_trace;
    let grad_at: Vec<(f64, f64)> = nodes.iter().map(|&n| (traj.s_nodes[n], g[n])).collect();
    let monotone = grad_at.windows(2).all(|p| p[1].1 <= p[0].1);
    let final_ok = grad_at.last().is_some_and(|&(_, v)| v <= threshold);
    let integral: f64 = (0..traj.n_steps())
        .map(|n| 0.5 * (g[n] + g[n + 1]) * (traj.s_nodes[n + 1] - traj.s_nodes[n]))
        .sum();
    let j_min = traj.j_trace.iter().copied().fold(f64::INFINITY, f64::min);
    let decrease = traj.j_trace[0] - j_min;
    let integral_rel_err = if decrease > 0.0 {
        (integral - decrease).abs() / decrease
    } else if integral == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    GradVanishingReport {
        grad_at,
        monotone,
        final_ok,
        integral,
        decrease,
        integral_rel_err,
        integral_ok: integral_rel_err <= 0.1,
    }
}

/// The integral part of [`verify_gradient_vanishing`] on an existing run.
pub fn integral_energy_check(traj: &FlowTrajectory, threshold: f64) -> GradVanishingReport {
    grad_vanishing_from(traj, &[traj.n_steps()], threshold)
}
