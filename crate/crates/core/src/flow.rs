//! The control-space gradient flow `dα_s/ds = −D_a H(X_s, Y_s, Z_s, α_s)` in
//! flow time `s`, its explicit and implicit discretizations, the interpolants
//! between flow steps and the checks made along trajectories.

use alloc::format;
use alloc::vec::Vec;

use crate::bsde::RegressionBasis;
use crate::error::{invalid, Result};
use crate::field::ControlField;
use crate::msa::{evaluate, gradient_field};
use crate::noise::BrownianEnsemble;
use crate::problem::ControlProblem;
use crate::prox::{check_tau, update_control, ProxSettings, UpdateMode};
use crate::sde::{path_costs, simulate_forward};
use crate::stats;

/// Which flow nodes keep their control field. Scalar traces are kept at
/// every node regardless.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StorePolicy {
    /// Every `max(1, N/100)`-th node.
    Thinned,
    /// Every `k`-th node.
    Every(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub basis: RegressionBasis,
    pub prox: ProxSettings,
    pub store: StorePolicy,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            basis: RegressionBasis::default(),
            prox: ProxSettings::default(),
            store: StorePolicy::Thinned,
        }
    }
}

/// A discrete flow trajectory on the nodes `s_n = nτ`, `n = 0..=N`.
///
/// The first and last nodes always keep their control field.
#[derive(Debug, Clone)]
pub struct FlowTrajectory {
    pub s_nodes: Vec<f64>,
    pub j_trace: Vec<f64>,
    /// Monte Carlo standard error of each `J` value.
    pub j_stderr: Vec<f64>,
    pub grad_norm_sq_trace: Vec<f64>,
    pub scheme: UpdateMode,
    pub tau: f64,
    stored: Vec<(usize, ControlField)>,
}

/// Piecewise-linear or piecewise-constant interpolation between flow nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolant {
    /// `α̂_s = αⁿ⁻¹ + (s − (n−1)τ)/τ · (αⁿ − αⁿ⁻¹)` on `[(n−1)τ, nτ]`.
    Linear,
    /// `α⁺_s = αⁿ` on `((n−1)τ, nτ]`.
    Plus,
    /// `α⁻_s = αⁿ⁻¹` on `[(n−1)τ, nτ)`.
    Minus,
}

impl FlowTrajectory {
    /// Number of flow steps `N`.
    pub fn n_steps(&self) -> usize {
        self.s_nodes.len() - 1
    }

    /// Final flow time `S`.
    pub fn horizon(&self) -> f64 {
        *self.s_nodes.last().unwrap()
    }

    /// Indices of the nodes whose control field was kept.
    pub fn stored_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.stored.iter().map(|(n, _)| *n)
    }

    pub fn control_at_node(&self, n: usize) -> Option<&ControlField> {
        self.stored
            .binary_search_by_key(&n, |(m, _)| *m)
            .ok()
            .map(|i| &self.stored[i].1)
    }

    pub fn final_control(&self) -> &ControlField {
        &self.stored.last().unwrap().1
    }

    fn node(&self, n: usize) -> Result<&ControlField> {
        self.control_at_node(n).ok_or_else(|| {
            invalid(format!("control at flow node {n} was not stored"))
        })
    }

    /// Interpolated control at flow time `s`. At a node all three
    /// interpolants return the stored iterate.
    pub fn interpolate(&self, s: f64, mode: Interpolant) -> Result<ControlField> {
        let horizon = self.horizon();
        if !(0.0..=horizon).contains(&s) {
            return Err(invalid(format!("flow time {s} outside [0, {horizon}]")));
        }
        let x = s / self.tau;
        let m = libm::round(x);
        if (x - m).abs() <= 1e-9 * x.max(1.0) {
            return Ok(self.node(m as usize)?.clone());
        }
        let n = (libm::ceil(x) as usize).min(self.n_steps());
        let theta = x - (n - 1) as f64;
        match mode {
            Interpolant::Plus => Ok(self.node(n)?.clone()),
            Interpolant::Minus => Ok(self.node(n - 1)?.clone()),
            Interpolant::Linear => self.node(n - 1)?.lerp(self.node(n)?, theta),
        }
    }
}

/// `interpolate_controls` in free-function form.
pub fn interpolate_controls(traj: &FlowTrajectory, s: f64, mode: Interpolant) -> Result<ControlField> {
    traj.interpolate(s, mode)
}

/// Integrates the flow from `α0` up to `S` with `N = ⌈S/τ_flow⌉` steps of
/// size `τ = S/N`.
///
/// The explicit scheme steps `α ← α − τ D_a H(α)`; the implicit scheme
/// applies one proximal update with step `τ`. Both reuse the noise `w` at
/// every step and neither adapts `τ`.
pub fn run_gradient_flow<P: ControlProblem + ?Sized>(
    pb: &P,
    alpha0: &ControlField,
    w: &BrownianEnsemble,
    horizon: f64,
    tau_flow: f64,
    scheme: UpdateMode,
    cfg: &FlowConfig,
) -> Result<FlowTrajectory> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(invalid(format!("flow horizon must be positive, got {horizon}")));
    }
    if !(tau_flow > 0.0) || !tau_flow.is_finite() {
        return Err(invalid(format!("flow step must be positive, got {tau_flow}")));
    }
    if scheme == UpdateMode::Implicit {
        check_tau(pb, tau_flow)?;
    }
    if alpha0.shape() != w.shape() || alpha0.grid() != w.grid() {
        return Err(invalid("initial control and Brownian ensemble differ in shape or grid"));
    }
    // tolerate S/τ landing a rounding error above an integer
    let n_steps = (libm::ceil(horizon / tau_flow - 1e-9) as usize).max(1);
    let tau = horizon / n_steps as f64;
    let stride = match cfg.store {
        StorePolicy::Thinned => (n_steps / 100).max(1),
        StorePolicy::Every(k) => {
            if k == 0 {
                return Err(invalid("store stride must be at least 1"));
            }
            k
        }
    };
    let mut traj = FlowTrajectory {
        s_nodes: Vec::with_capacity(n_steps + 1),
        j_trace: Vec::with_capacity(n_steps + 1),
        j_stderr: Vec::with_capacity(n_steps + 1),
        grad_norm_sq_trace: Vec::with_capacity(n_steps + 1),
        scheme,
        tau,
        stored: Vec::new(),
    };
    let mut alpha = alpha0.clone();
    for n in 0..=n_steps {
        let ev = evaluate(pb, &alpha, w, &cfg.basis)?;
        traj.s_nodes.push(if n == n_steps { horizon } else { n as f64 * tau });
        traj.j_trace.push(ev.cost);
        traj.j_stderr.push(ev.cost_stderr);
        traj.grad_norm_sq_trace.push(ev.grad_norm_sq);
        if n == n_steps {
            traj.stored.push((n, alpha));
            break;
        }
        let next = update_control(pb, &alpha, &ev.x, &ev.sol, tau, scheme, cfg.prox)?;
        if n % stride == 0 {
            traj.stored.push((n, alpha));
        }
        alpha = next;
    }
    Ok(traj)
}

/// Centered difference of `J` along the flow against `−‖D_a H‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    /// Largest `|dJ/ds + ‖D_a H‖²| / ‖D_a H‖²` over eligible nodes.
    pub max_rel_err: Option<f64>,
    /// Interior nodes with `‖D_a H‖² ≥ floor`.
    pub eligible: usize,
    pub worst_node: Option<usize>,
}

impl EnergyReport {
    pub fn no_eligible_nodes(&self) -> bool {
        self.eligible == 0
    }
}

/// Gradient norms below this are too small for a relative comparison.
pub const ENERGY_FLOOR: f64 = 1e-6;

/// Checks `(J(s+τ) − J(s−τ))/(2τ) ≈ −‖D_a H(s)‖²` at interior nodes.
pub fn energy_identity_check(traj: &FlowTrajectory) -> Result<EnergyReport> {
    let nodes = traj.s_nodes.len();
    if nodes < 3 {
        return Err(invalid(format!("energy check needs at least 3 nodes, got {nodes}")));
    }
    let mut report = EnergyReport {
        max_rel_err: None,
        eligible: 0,
        worst_node: None,
    };
    for n in 1..nodes - 1 {
        let g = traj.grad_norm_sq_trace[n];
        if g < ENERGY_FLOOR {
            continue;
        }
        let ds = traj.s_nodes[n + 1] - traj.s_nodes[n - 1];
        let dj = (traj.j_trace[n + 1] - traj.j_trace[n - 1]) / ds;
        let rel = (dj + g).abs() / g;
        report.eligible += 1;
        if report.max_rel_err.is_none_or(|m| rel > m) {
            report.max_rel_err = Some(rel);
            report.worst_node = Some(n);
        }
    }
    Ok(report)
}

/// Both sides of `J(β) − J(θ) ≤ (D_a H(X^β, Y^β, Z^β, β), β − θ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    pub lhs: f64,
    pub rhs: f64,
    /// Standard error of the pathwise `lhs − rhs`.
    pub stderr: f64,
    /// `lhs ≤ rhs + 3·stderr`.
    pub satisfied: bool,
}

/// Evaluates the convexity gap inequality on common noise. The inequality
/// is a theorem only for problems convex in `(x, a)`; for others the report
/// simply records whether it held.
pub fn gap_bound_check<P: ControlProblem + ?Sized>(
    pb: &P,
    w: &BrownianEnsemble,
    basis: &RegressionBasis,
    beta: &ControlField,
    theta: &ControlField,
) -> Result<GapReport> {
    let ev = evaluate(pb, beta, w, basis)?;
    let grad = gradient_field(pb, beta, &ev.x, &ev.sol)?;
    let cb = path_costs(pb, beta, &ev.x)?;
    let ct = path_costs(pb, theta, &simulate_forward(pb, theta, w)?)?;
    let grid = *beta.grid();
    let dt = grid.dt();
    let n_paths = beta.shape().n_paths;
    let mut lhs = Vec::with_capacity(n_paths);
    let mut rhs = vec_zeros(n_paths);
    for k in 0..grid.n_steps() {
        for (path, r) in rhs.iter_mut().enumerate() {
            *r += grad
                .at(path, k)
                .iter()
                .zip(beta.at(path, k).iter().zip(theta.at(path, k)))
                .map(|(g, (b, t))| g * (b - t))
                .sum::<f64>();
        }
    }
    rhs.iter_mut().for_each(|r| *r *= dt);
    let mut diff = Vec::with_capacity(n_paths);
    for path in 0..n_paths {
        lhs.push(cb[path] - ct[path]);
        diff.push(lhs[path] - rhs[path]);
    }
    let lhs = stats::mean(&lhs);
    let rhs = stats::mean(&rhs);
    let (_, stderr) = stats::mean_and_stderr(&diff);
    Ok(GapReport {
        lhs,
        rhs,
        stderr,
        satisfied: lhs <= rhs + 3.0 * stderr,
    })
}

fn vec_zeros(n: usize) -> Vec<f64> {
    alloc::vec![0.0; n]
}
