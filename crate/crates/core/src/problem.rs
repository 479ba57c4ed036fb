//! Control problems and their Hamiltonian.
//!
//! A problem supplies the coefficients `b`, `σ`, `f`, `g` together with closed
//! form derivatives. `D²_a σ` is assumed to vanish, so there is no slot for it.
//! [`check_derivatives`] compares every derivative against central
//! differences and is the intended guard for hand-written problems.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::rng::Stream;

/// State, noise and control dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub d: usize,
    pub d_w: usize,
    pub p: usize,
}

/// Coefficients of `dX = b(t,X,α)dt + σ(t,X,α)dW`, running cost `f` and
/// terminal cost `g`, plus their derivatives.
///
/// Output layouts are row-major: `σ` is `d × d_w`; `D_x b` is `d × d`
/// (`∂b_i/∂x_j` at `i·d + j`); `D_x σ` is `d × d_w × d`; `D_a σ` is
/// `d × d_w × p`; `D²_a b` is `d × p × p`.
pub trait ControlProblem {
    fn dims(&self) -> Dims;
    fn x0(&self) -> &[f64];

    fn drift(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]);
    fn diffusion(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]);
    fn running_cost(&self, t: f64, x: &[f64], a: &[f64]) -> f64;
    fn terminal_cost(&self, x: &[f64]) -> f64;

    fn drift_dx(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]);
    fn drift_da(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]);
    fn diffusion_dx(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]);
    fn diffusion_da(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]);
    fn running_cost_dx(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]);
    fn running_cost_da(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]);
    fn terminal_cost_dx(&self, x: &[f64], out: &mut [f64]);
    fn drift_daa(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]);
    fn running_cost_daa(&self, t: f64, x: &[f64], a: &[f64], out: &mut [f64]);

    /// `λ` such that `a ↦ H(t,x,y,z,a) + λ/2·|a|²` is convex.
    fn lambda_hint(&self) -> f64 {
        0.0
    }

    /// `D²_a H` does not depend on `a` (or on `y`), so the proximal step is a
    /// single linear solve.
    fn hessian_a_constant(&self) -> bool {
        false
    }

    /// Constant `K` of the lower bound `f ≥ −K + |a|²/K`, when known.
    fn cost_bound(&self) -> Option<f64> {
        None
    }
}

/// Value and derivatives of `H = b·y + σ:z + f` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianEval {
    pub value: f64,
    pub grad_x: Vec<f64>,
    pub grad_a: Vec<f64>,
    pub hess_a: Vec<f64>,
}

/// Scratch buffers for repeated Hamiltonian evaluations in hot loops.
#[derive(Debug, Clone)]
pub struct HamiltonianWorkspace {
    dims: Dims,
    b: Vec<f64>,
    sig: Vec<f64>,
    bx: Vec<f64>,
    ba: Vec<f64>,
    sx: Vec<f64>,
    sa: Vec<f64>,
    fx: Vec<f64>,
    fa: Vec<f64>,
    baa: Vec<f64>,
    faa: Vec<f64>,
}

impl HamiltonianWorkspace {
    pub fn new(dims: Dims) -> Self {
        let Dims { d, d_w, p } = dims;
        Self {
            dims,
            b: vec![0.0; d],
            sig: vec![0.0; d * d_w],
            bx: vec![0.0; d * d],
            ba: vec![0.0; d * p],
            sx: vec![0.0; d * d_w * d],
            sa: vec![0.0; d * d_w * p],
            fx: vec![0.0; d],
            fa: vec![0.0; p],
            baa: vec![0.0; d * p * p],
            faa: vec![0.0; p * p],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn value<P: ControlProblem + ?Sized>(
        &mut self,
        pb: &P,
        t: f64,
        x: &[f64],
        y: &[f64],
        z: &[f64],
        a: &[f64],
    ) -> f64 {
        pb.drift(t, x, a, &mut self.b);
        pb.diffusion(t, x, a, &mut self.sig);
        let mut h = pb.running_cost(t, x, a);
        for (bi, yi) in self.b.iter().zip(y) {
            h += bi * yi;
        }
        for (si, zi) in self.sig.iter().zip(z) {
            h += si * zi;
        }
        h
    }

    /// `D_x H` into `out` (length `d`).
    #[allow(clippy::too_many_arguments)]
    pub fn grad_x<P: ControlProblem + ?Sized>(
        &mut self,
        pb: &P,
        t: f64,
        x: &[f64],
        y: &[f64],
        z: &[f64],
        a: &[f64],
        out: &mut [f64],
    ) {
        let Dims { d, d_w, .. } = self.dims;
        pb.drift_dx(t, x, a, &mut self.bx);
        pb.diffusion_dx(t, x, a, &mut self.sx);
        pb.running_cost_dx(t, x, a, &mut self.fx);
        for j in 0..d {
            let mut g = self.fx[j];
            for i in 0..d {
                g += self.bx[i * d + j] * y[i];
                for l in 0..d_w {
                    g += self.sx[(i * d_w + l) * d + j] * z[i * d_w + l];
                }
            }
            out[j] = g;
        }
    }

    /// `D_a H` into `out` (length `p`).
    #[allow(clippy::too_many_arguments)]
    pub fn grad_a<P: ControlProblem + ?Sized>(
        &mut self,
        pb: &P,
        t: f64,
        x: &[f64],
        y: &[f64],
        z: &[f64],
        a: &[f64],
        out: &mut [f64],
    ) {
        let Dims { d, d_w, p } = self.dims;
        pb.drift_da(t, x, a, &mut self.ba);
        pb.diffusion_da(t, x, a, &mut self.sa);
        pb.running_cost_da(t, x, a, &mut self.fa);
        for j in 0..p {
            let mut g = self.fa[j];
            for i in 0..d {
                g += self.ba[i * p + j] * y[i];
                for l in 0..d_w {
                    g += self.sa[(i * d_w + l) * p + j] * z[i * d_w + l];
                }
            }
            out[j] = g;
        }
    }

    /// `D²_a H` into `out` (`p × p`). The `σ` term vanishes by assumption.
    pub fn hess_a<P: ControlProblem + ?Sized>(
        &mut self,
        pb: &P,
        t: f64,
        x: &[f64],
        y: &[f64],
        a: &[f64],
        out: &mut [f64],
    ) {
        let Dims { d, p, .. } = self.dims;
        pb.drift_daa(t, x, a, &mut self.baa);
        pb.running_cost_daa(t, x, a, &mut self.faa);
        for j in 0..p {
            for k in 0..p {
                let mut h = self.faa[j * p + k];
                for i in 0..d {
                    h += self.baa[(i * p + j) * p + k] * y[i];
                }
                out[j * p + k] = h;
            }
        }
    }
}

fn check_len(name: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(invalid(format!("{name} has length {got}, expected {want}")));
    }
    Ok(())
}

/// Evaluates `H`, `D_x H`, `D_a H` and `D²_a H` at one point.
pub fn hamiltonian<P: ControlProblem + ?Sized>(
    pb: &P,
    t: f64,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    a: &[f64],
) -> Result<HamiltonianEval> {
    let dims = pb.dims();
    check_len("x", x.len(), dims.d)?;
    check_len("y", y.len(), dims.d)?;
    check_len("z", z.len(), dims.d * dims.d_w)?;
    check_len("a", a.len(), dims.p)?;
    let mut ws = HamiltonianWorkspace::new(dims);
    let value = ws.value(pb, t, x, y, z, a);
    let mut grad_x = vec![0.0; dims.d];
    let mut grad_a = vec![0.0; dims.p];
    let mut hess_a = vec![0.0; dims.p * dims.p];
    ws.grad_x(pb, t, x, y, z, a, &mut grad_x);
    ws.grad_a(pb, t, x, y, z, a, &mut grad_a);
    ws.hess_a(pb, t, x, y, a, &mut hess_a);
    Ok(HamiltonianEval {
        value,
        grad_x,
        grad_a,
        hess_a,
    })
}

/// Sampling box for [`check_derivatives`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckBox {
    pub t_max: f64,
    pub x: (f64, f64),
    pub a: (f64, f64),
    /// Central-difference step.
    pub h: f64,
}

impl Default for CheckBox {
    fn default() -> Self {
        Self {
            t_max: 1.0,
            x: (-2.0, 2.0),
            a: (-2.0, 2.0),
            h: 1e-5,
        }
    }
}

/// Maximum relative error `|analytic − fd| / max(1, |fd|)` per derivative.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DerivativeReport {
    pub drift_dx: f64,
    pub drift_da: f64,
    pub diffusion_dx: f64,
    pub diffusion_da: f64,
    pub running_cost_dx: f64,
    pub running_cost_da: f64,
    pub terminal_cost_dx: f64,
    pub drift_daa: f64,
    pub running_cost_daa: f64,
    /// Sampled points violating `f ≥ −K + |a|²/K`, when `K` is known.
    pub lower_bound_violations: Option<usize>,
}

impl DerivativeReport {
    pub fn entries(&self) -> [(&'static str, f64); 9] {
        [
            ("drift_dx", self.drift_dx),
            ("drift_da", self.drift_da),
            ("diffusion_dx", self.diffusion_dx),
            ("diffusion_da", self.diffusion_da),
            ("running_cost_dx", self.running_cost_dx),
            ("running_cost_da", self.running_cost_da),
            ("terminal_cost_dx", self.terminal_cost_dx),
            ("drift_daa", self.drift_daa),
            ("running_cost_daa", self.running_cost_daa),
        ]
    }

    pub fn max_error(&self) -> f64 {
        self.entries().iter().fold(0.0, |m, &(_, e)| m.max(e))
    }
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(1.0)
}

/// Central difference of a vector-valued map along one coordinate of `v`.
/// Writes `(F(v + h e_i) − F(v − h e_i)) / 2h` for every output component.
fn central<F>(v: &[f64], i: usize, h: f64, n_out: usize, mut eval: F) -> Vec<f64>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let mut vp = v.to_vec();
    let mut vm = v.to_vec();
    vp[i] += h;
    vm[i] -= h;
    let mut fp = vec![0.0; n_out];
    let mut fm = vec![0.0; n_out];
    eval(&vp, &mut fp);
    eval(&vm, &mut fm);
    fp.iter().zip(&fm).map(|(p, m)| (p - m) / (2.0 * h)).collect()
}

/// Compares every derivative callback against central differences of the
/// underlying callback at `n_points` random `(t, x, a)` in `bx`.
///
/// The last index of each derivative layout is the differentiation variable,
/// so the finite difference along coordinate `j` fills entries `[.., j]`.
pub fn check_derivatives<P: ControlProblem + ?Sized>(
    pb: &P,
    n_points: usize,
    seed: u64,
    bx: CheckBox,
) -> Result<DerivativeReport> {
    if n_points == 0 {
        return Err(invalid("n_points must be at least 1"));
    }
    let Dims { d, d_w, p } = pb.dims();
    let h = bx.h;
    let mut rng = Stream::new(seed, 0xDE21);
    let mut rep = DerivativeReport::default();
    let mut violations = 0usize;
    let mut buf = Vec::new();

    fn update(slot: &mut f64, analytic: &[f64], fd: &[f64], stride: usize, j: usize) {
        for (r, f) in fd.iter().enumerate() {
            *slot = slot.max(rel_err(analytic[r * stride + j], *f));
        }
    }

    for _ in 0..n_points {
        let t = rng.uniform_in(0.0, bx.t_max);
        let x: Vec<f64> = (0..d).map(|_| rng.uniform_in(bx.x.0, bx.x.1)).collect();
        let a: Vec<f64> = (0..p).map(|_| rng.uniform_in(bx.a.0, bx.a.1)).collect();

        // x-derivatives
        buf.resize(d * d, 0.0);
        pb.drift_dx(t, &x, &a, &mut buf);
        let bx_an = buf.clone();
        buf.resize(d * d_w * d, 0.0);
        pb.diffusion_dx(t, &x, &a, &mut buf);
        let sx_an = buf.clone();
        buf.resize(d, 0.0);
        pb.running_cost_dx(t, &x, &a, &mut buf);
        let fx_an = buf.clone();
        pb.terminal_cost_dx(&x, &mut buf);
        let gx_an = buf.clone();
        for j in 0..d {
            let fd = central(&x, j, h, d, |xv, o| pb.drift(t, xv, &a, o));
            update(&mut rep.drift_dx, &bx_an, &fd, d, j);
            let fd = central(&x, j, h, d * d_w, |xv, o| pb.diffusion(t, xv, &a, o));
            update(&mut rep.diffusion_dx, &sx_an, &fd, d, j);
            let fd = central(&x, j, h, 1, |xv, o| o[0] = pb.running_cost(t, xv, &a));
            update(&mut rep.running_cost_dx, &fx_an, &fd, d, j);
            let fd = central(&x, j, h, 1, |xv, o| o[0] = pb.terminal_cost(xv));
            update(&mut rep.terminal_cost_dx, &gx_an, &fd, d, j);
        }

        // a-derivatives
        buf.resize(d * p, 0.0);
        pb.drift_da(t, &x, &a, &mut buf);
        let ba_an = buf.clone();
        buf.resize(d * d_w * p, 0.0);
        pb.diffusion_da(t, &x, &a, &mut buf);
        let sa_an = buf.clone();
        buf.resize(p, 0.0);
        pb.running_cost_da(t, &x, &a, &mut buf);
        let fa_an = buf.clone();
        buf.resize(d * p * p, 0.0);
        pb.drift_daa(t, &x, &a, &mut buf);
        let baa_an = buf.clone();
        buf.resize(p * p, 0.0);
        pb.running_cost_daa(t, &x, &a, &mut buf);
        let faa_an = buf.clone();
        for j in 0..p {
            let fd = central(&a, j, h, d, |av, o| pb.drift(t, &x, av, o));
            update(&mut rep.drift_da, &ba_an, &fd, p, j);
            let fd = central(&a, j, h, d * d_w, |av, o| pb.diffusion(t, &x, av, o));
            update(&mut rep.diffusion_da, &sa_an, &fd, p, j);
            let fd = central(&a, j, h, 1, |av, o| o[0] = pb.running_cost(t, &x, av));
            update(&mut rep.running_cost_da, &fa_an, &fd, p, j);
            let fd = central(&a, j, h, d * p, |av, o| pb.drift_da(t, &x, av, o));
            update(&mut rep.drift_daa, &baa_an, &fd, p, j);
            let fd = central(&a, j, h, p, |av, o| pb.running_cost_da(t, &x, av, o));
            update(&mut rep.running_cost_daa, &faa_an, &fd, p, j);
        }

        if let Some(k) = pb.cost_bound() {
            let a2: f64 = a.iter().map(|v| v * v).sum();
            if pb.running_cost(t, &x, &a) < -k + a2 / k {
                violations += 1;
            }
        }
    }
    if pb.cost_bound().is_some() {
        rep.lower_bound_violations = Some(violations);
    }
    Ok(rep)
}
