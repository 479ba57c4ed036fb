//! Built-in scalar problems (`d = d_w = p = 1`).
//!
//! * [`example_lq_modified`]: linear dynamics, quadratic costs that switch to
//!   linear growth in `x` outside `|x| ≤ 1`.
//! * [`example_quartic`]: same dynamics, double-well running cost in `a`.
//! * [`example_logistic`]: logistic drift `L(x)·A·L(a)` with the costs of the
//!   first example.
//! * [`quadratic_toy`]: `f = a²`, no coupling between control and state, so
//!   the gradient flow is `α_s = α_0 e^{−2s}` exactly.
//!
//! At the switch points `|x| = 1` and `|a| = 1` the derivative callbacks use
//! the inside branch.

use alloc::format;

use crate::error::{invalid, Result};
use crate::problem::{ControlProblem, Dims};

/// Coefficients shared by the linear examples:
/// `b = A x + B a + β`, `σ = C x + D a + γ`, costs weighted by `L`, `M`, `N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqParams {
    pub a: f64,
    pub b: f64,
    pub beta: f64,
    pub c: f64,
    pub d: f64,
    pub gamma: f64,
    pub l: f64,
    pub m: f64,
    pub n: f64,
    pub x0: f64,
}

impl Default for LqParams {
    fn default() -> Self {
        Self {
            a: 0.2,
            b: 1.0,
            beta: 0.0,
            c: 0.1,
            d: 0.2,
            gamma: 0.1,
            l: 1.0,
            m: 1.0,
            n: 1.0,
            x0: 0.5,
        }
    }
}

/// Logistic drift `b = L(x)·A·L(a)`, affine diffusion
/// `σ = σ_x x + σ_a a + σ_c`, costs as in the modified LQ example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticParams {
    pub amp: f64,
    pub sigma_x: f64,
    pub sigma_a: f64,
    pub sigma_c: f64,
    pub l: f64,
    pub m: f64,
    pub n: f64,
    pub x0: f64,
    /// Bound on `|y|` used when computing `lambda_hint`.
    pub y_bound: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        Self {
            amp: 1.0,
            sigma_x: 0.1,
            sigma_a: 0.2,
            sigma_c: 0.1,
            l: 1.0,
            m: 1.0,
            n: 1.0,
            x0: 0.5,
            y_bound: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Drift {
    Linear { a: f64, b: f64, beta: f64 },
    Logistic { amp: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum RunningCost {
    Quadratic { l: f64, m: f64 },
    Quartic { l: f64, m: f64 },
}

/// A scalar problem assembled from one of the drift and cost families above.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarModel {
    name: &'static str,
    x0: [f64; 1],
    drift: Drift,
    sigma: (f64, f64, f64),
    cost: RunningCost,
    n: f64,
    lambda: f64,
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

fn logistic_d1(x: f64) -> f64 {
    let l = logistic(x);
    l * (1.0 - l)
}

fn logistic_d2(x: f64) -> f64 {
    let l = logistic(x);
    l * (1.0 - l) * (1.0 - 2.0 * l)
}

/// `½w x²` for `|x| ≤ 1`, `½w|x|` outside.
fn switched(w: f64, x: f64) -> f64 {
    if x.abs() <= 1.0 {
        0.5 * w * x * x
    } else {
        0.5 * w * x.abs()
    }
}

fn switched_dx(w: f64, x: f64) -> f64 {
    if x.abs() <= 1.0 {
        w * x
    } else {
        0.5 * w * x.signum()
    }
}

fn quartic(m: f64, a: f64) -> f64 {
    if a > 1.0 {
        (a - 1.0) * (a - 1.0)
    } else if a < -1.0 {
        (a + 1.0) * (a + 1.0)
    } else {
        0.5 * m * (a * a * a * a - a * a)
    }
}

fn quartic_da(m: f64, a: f64) -> f64 {
    if a > 1.0 {
        2.0 * (a - 1.0)
    } else if a < -1.0 {
        2.0 * (a + 1.0)
    } else {
        0.5 * m * (4.0 * a * a * a - 2.0 * a)
    }
}

fn quartic_daa(m: f64, a: f64) -> f64 {
    if a.abs() > 1.0 {
        2.0
    } else {
        0.5 * m * (12.0 * a * a - 2.0)
    }
}

fn check_lq(p: &LqParams) -> Result<()> {
    let fields = [
        ("A", p.a),
        ("B", p.b),
        ("beta", p.beta),
        ("C", p.c),
        ("D", p.d),
        ("gamma", p.gamma),
        ("L", p.l),
        ("M", p.m),
        ("N", p.n),
        ("x0", p.x0),
    ];
    for (name, v) in fields {
        if !v.is_finite() {
            return Err(invalid(format!("parameter {name} is not finite")));
        }
    }
    if p.m <= 0.0 {
        return Err(invalid(format!("M must be positive, got {}", p.m)));
    }
    if p.l < 0.0 || p.n < 0.0 {
        return Err(invalid("L and N must be non-negative"));
    }
    Ok(())
}

/// Linear dynamics with the piecewise quadratic/linear costs.
pub fn example_lq_modified(p: LqParams) -> Result<ScalarModel> {
    check_lq(&p)?;
    Ok(ScalarModel {
        name: "lq_modified",
        x0: [p.x0],
        drift: Drift::Linear {
            a: p.a,
            b: p.b,
            beta: p.beta,
        },
        sigma: (p.c, p.d, p.gamma),
        cost: RunningCost::Quadratic { l: p.l, m: p.m },
        n: p.n,
        lambda: 0.0,
    })
}

/// Linear dynamics with the double-well running cost
/// `½M(a⁴ − a²)` on `|a| ≤ 1`, `(a ∓ 1)²` outside.
///
/// `D²_a f ≥ −M`, so `lambda_hint` is `2.01`, or `M + 0.01` when `M > 2`.
pub fn example_quartic(p: LqParams) -> Result<ScalarModel> {
    check_lq(&p)?;
    Ok(ScalarModel {
        name: "quartic",
        x0: [p.x0],
        drift: Drift::Linear {
            a: p.a,
            b: p.b,
            beta: p.beta,
        },
        sigma: (p.c, p.d, p.gamma),
        cost: RunningCost::Quartic { l: p.l, m: p.m },
        n: p.n,
        lambda: if p.m > 2.0 { p.m + 0.01 } else { 2.01 },
    })
}

/// Smallest value of `D²_a H = A L(x) L''(a) y + M` over `x, a ∈ [−6, 6]`,
/// `|y| ≤ y_bound` on a 481 × 481 grid. `H` is affine in `y`, so only
/// `y = ±y_bound` need checking.
fn logistic_min_hessian(p: &LogisticParams) -> f64 {
    const N: usize = 481;
    let mut min = f64::INFINITY;
    for i in 0..N {
        let x = -6.0 + 12.0 * i as f64 / (N - 1) as f64;
        let lx = logistic(x);
        for j in 0..N {
            let a = -6.0 + 12.0 * j as f64 / (N - 1) as f64;
            let curv = p.amp * lx * logistic_d2(a);
            for y in [-p.y_bound, p.y_bound] {
                min = min.min(curv * y + p.m);
            }
        }
    }
    min
}

/// Logistic drift with the costs of [`example_lq_modified`]. `lambda_hint` is
/// computed by grid minimization of `D²_a H`.
pub fn example_logistic(p: LogisticParams) -> Result<ScalarModel> {
    let fields = [
        ("A", p.amp),
        ("sigma_x", p.sigma_x),
        ("sigma_a", p.sigma_a),
        ("sigma_c", p.sigma_c),
        ("L", p.l),
        ("M", p.m),
        ("N", p.n),
        ("x0", p.x0),
        ("y_bound", p.y_bound),
    ];
    for (name, v) in fields {
        if !v.is_finite() {
            return Err(invalid(format!("parameter {name} is not finite")));
        }
    }
    if p.m <= 0.0 {
        return Err(invalid(format!("M must be positive, got {}", p.m)));
    }
    if p.l < 0.0 || p.n < 0.0 || p.y_bound < 0.0 {
        return Err(invalid("L, N and y_bound must be non-negative"));
    }
    let lambda = (-logistic_min_hessian(&p)).max(0.0);
    Ok(ScalarModel {
        name: "logistic",
        x0: [p.x0],
        drift: Drift::Logistic { amp: p.amp },
        sigma: (p.sigma_x, p.sigma_a, p.sigma_c),
        cost: RunningCost::Quadratic { l: p.l, m: p.m },
        n: p.n,
        lambda,
    })
}

/// `f = a²`, `g = 0`, `b = σ = 0`: `D_a H = 2a` regardless of the state.
pub fn quadratic_toy(x0: f64) -> Result<ScalarModel> {
    let mut m = example_lq_modified(LqParams {
        a: 0.0,
        b: 0.0,
        beta: 0.0,
        c: 0.0,
        d: 0.0,
        gamma: 0.0,
        l: 0.0,
        m: 2.0,
        n: 0.0,
        x0,
    })?;
    m.name = "quadratic_toy";
    Ok(m)
}

impl ScalarModel {
    pub fn name(&self) -> &'static str {
        self.name
    }

    /// Strong-convexity modulus of `a ↦ H` when it is uniform, i.e. `M` for
    /// the linear-dynamics quadratic-cost problems.
    pub fn strong_convexity(&self) -> Option<f64> {
        match (self.drift, self.cost) {
            (Drift::Linear { .. }, RunningCost::Quadratic { m, .. }) => Some(m),
            _ => None,
        }
    }

    /// Parameters of the linear-quadratic family, when this is one.
    pub fn lq_params(&self) -> Option<LqParams> {
        match (self.drift, self.cost) {
            (Drift::Linear { a, b, beta }, RunningCost::Quadratic { l, m }) => Some(LqParams {
                a,
                b,
                beta,
                c: self.sigma.0,
                d: self.sigma.1,
                gamma: self.sigma.2,
                l,
                m,
                n: self.n,
                x0: self.x0[0],
            }),
            _ => None,
        }
    }

    fn cost_weights(&self) -> (f64, f64) {
        match self.cost {
            RunningCost::Quadratic { l, m } | RunningCost::Quartic { l, m } => (l, m),
        }
    }
}

impl ControlProblem for ScalarModel {
    fn dims(&self) -> Dims {
        Dims { d: 1, d_w: 1, p: 1 }
    }

    fn x0(&self) -> &[f64] {
        &self.x0
    }

    fn drift(&self, _t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        out[0] = match self.drift {
            Drift::Linear { a: ca, b, beta } => ca * x[0] + b * a[0] + beta,
            Drift::Logistic { amp } => logistic(x[0]) * amp * logistic(a[0]),
        };
    }

    fn diffusion(&self, _t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        let (sx, sa, sc) = self.sigma;
        out[0] = sx * x[0] + sa * a[0] + sc;
    }

    fn running_cost(&self, _t: f64, x: &[f64], a: &[f64]) -> f64 {
        match self.cost {
            RunningCost::Quadratic { l, m } => switched(l, x[0]) + 0.5 * m * a[0] * a[0],
            RunningCost::Quartic { l, m } => switched(l, x[0]) + quartic(m, a[0]),
        }
    }

    fn terminal_cost(&self, x: &[f64]) -> f64 {
        switched(self.n, x[0])
    }

    fn drift_dx(&self, _t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        out[0] = match self.drift {
            Drift::Linear { a: ca, .. } => ca,
            Drift::Logistic { amp } => amp * logistic_d1(x[0]) * logistic(a[0]),
        };
    }

    fn drift_da(&self, _t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        out[0] = match self.drift {
            Drift::Linear { b, .. } => b,
            Drift::Logistic { amp } => amp * logistic(x[0]) * logistic_d1(a[0]),
        };
    }

    fn diffusion_dx(&self, _t: f64, _x: &[f64], _a: &[f64], out: &mut [f64]) {
        out[0] = self.sigma.0;
    }

    fn diffusion_da(&self, _t: f64, _x: &[f64], _a: &[f64], out: &mut [f64]) {
        out[0] = self.sigma.1;
    }

    fn running_cost_dx(&self, _t: f64, x: &[f64], _a: &[f64], out: &mut [f64]) {
        let (l, _) = self.cost_weights();
        out[0] = switched_dx(l, x[0]);
    }

    fn running_cost_da(&self, _t: f64, _x: &[f64], a: &[f64], out: &mut [f64]) {
        out[0] = match self.cost {
            RunningCost::Quadratic { m, .. } => m * a[0],
            RunningCost::Quartic { m, .. } => quartic_da(m, a[0]),
        };
    }

    fn terminal_cost_dx(&self, x: &[f64], out: &mut [f64]) {
        out[0] = switched_dx(self.n, x[0]);
    }

    fn drift_daa(&self, _t: f64, x: &[f64], a: &[f64], out: &mut [f64]) {
        out[0] = match self.drift {
            Drift::Linear { .. } => 0.0,
            Drift::Logistic { amp } => amp * logistic(x[0]) * logistic_d2(a[0]),
        };
    }

    fn running_cost_daa(&self, _t: f64, _x: &[f64], a: &[f64], out: &mut [f64]) {
        out[0] = match self.cost {
            RunningCost::Quadratic { m, .. } => m,
            RunningCost::Quartic { m, .. } => quartic_daa(m, a[0]),
        };
    }

    fn lambda_hint(&self) -> f64 {
        self.lambda
    }

    fn hessian_a_constant(&self) -> bool {
        matches!(
            (self.drift, self.cost),
            (Drift::Linear { .. }, RunningCost::Quadratic { .. })
        )
    }

    fn cost_bound(&self) -> Option<f64> {
        let (_, m) = self.cost_weights();
        match self.cost {
            RunningCost::Quadratic { .. } => Some(2.0 / m),
            RunningCost::Quartic { .. } => Some(4.0_f64.max(2.0 / m).max(m)),
        }
    }
}
