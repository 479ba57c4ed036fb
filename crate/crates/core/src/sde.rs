//! Euler–Maruyama simulation of the controlled state and Monte Carlo cost.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::field::{ControlField, StatePaths};
use crate::noise::BrownianEnsemble;
use crate::problem::ControlProblem;
use crate::stats;

/// States beyond this magnitude abort the simulation.
pub const BLOWUP_THRESHOLD: f64 = 1e8;

pub(crate) fn check_problem_shape<P: ControlProblem + ?Sized>(
    pb: &P,
    alpha: &ControlField,
) -> Result<()> {
    let dims = pb.dims();
    let s = alpha.shape();
    if (s.d, s.d_w, s.p) != (dims.d, dims.d_w, dims.p) {
        return Err(invalid(format!(
            "ensemble dims (d={}, d_w={}, p={}) do not match the problem ({}, {}, {})",
            s.d, s.d_w, s.p, dims.d, dims.d_w, dims.p
        )));
    }
    if pb.x0().len() != dims.d {
        return Err(invalid("x0 length does not match the state dimension"));
    }
    Ok(())
}

/// Euler–Maruyama over every path (evaluation and regression), asking
/// `control(path, k, t_k, X_k, out)` for the control of each step.
fn euler<P, F>(pb: &P, w: &BrownianEnsemble, mut control: F) -> Result<StatePaths>
where
    P: ControlProblem + ?Sized,
    F: FnMut(usize, usize, f64, &[f64], &mut [f64]),
{
    let shape = *w.shape();
    let grid = *w.grid();
    let (d, dw) = (shape.d, shape.d_w);
    let n = grid.n_steps();
    let dt = grid.dt();
    let paths = shape.total_paths();
    let layer = paths * d;
    let mut values = vec![0.0; (n + 1) * layer];
    let mut a = vec![0.0; shape.p];
    let mut b = vec![0.0; d];
    let mut sig = vec![0.0; d * dw];
    for path in 0..paths {
        values[path * d..(path + 1) * d].copy_from_slice(pb.x0());
    }
    for k in 0..n {
        let t = grid.time(k);
        let (done, rest) = values.split_at_mut((k + 1) * layer);
        let cur_layer = &done[k * layer..];
        let next_layer = &mut rest[..layer];
        for path in 0..paths {
            let cur = &cur_layer[path * d..(path + 1) * d];
            let next = &mut next_layer[path * d..(path + 1) * d];
            control(path, k, t, cur, &mut a);
            pb.drift(t, cur, &a, &mut b);
            pb.diffusion(t, cur, &a, &mut sig);
            let dwk = w.increment(path, k);
            for i in 0..d {
                let mut v = cur[i] + b[i] * dt;
                for l in 0..dw {
                    v += sig[i * dw + l] * dwk[l];
                }
                if !v.is_finite() || v.abs() > BLOWUP_THRESHOLD {
                    return Err(Error::NumericalBlowup {
                        path,
                        step: k + 1,
                        what: format!("state component {i} reached {v:e}"),
                    });
                }
                next[i] = v;
            }
        }
    }
    Ok(StatePaths::from_values(shape, grid, values))
}

/// `X_{k+1} = X_k + b(t_k, X_k, α_k) dt + σ(t_k, X_k, α_k) ΔW_k`, `X_0 = x₀`.
pub fn simulate_forward<P: ControlProblem + ?Sized>(
    pb: &P,
    alpha: &ControlField,
    w: &BrownianEnsemble,
) -> Result<StatePaths> {
    if alpha.shape() != w.shape() || alpha.grid() != w.grid() {
        return Err(invalid("control field and Brownian ensemble differ in shape or grid"));
    }
    check_problem_shape(pb, alpha)?;
    euler(pb, w, |path, k, _, _, out| out.copy_from_slice(alpha.at(path, k)))
}

/// Simulates the state under a feedback law `α_k = policy(t_k, X_k)` and
/// records the resulting open-loop control field alongside the paths.
pub fn simulate_closed_loop<P, F>(
    pb: &P,
    w: &BrownianEnsemble,
    mut policy: F,
) -> Result<(ControlField, StatePaths)>
where
    P: ControlProblem + ?Sized,
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let mut alpha = ControlField::zeros(*w.shape(), *w.grid());
    check_problem_shape(pb, &alpha)?;
    let x = euler(pb, w, |path, k, t, x, out| {
        policy(t, x, out);
        alpha.at_mut(path, k).copy_from_slice(out);
    })?;
    Ok((alpha, x))
}

/// Pathwise costs `Σ_k f(t_k, X_k, α_k) dt + g(X_T)` on the evaluation paths.
pub fn path_costs<P: ControlProblem + ?Sized>(
    pb: &P,
    alpha: &ControlField,
    x: &StatePaths,
) -> Result<Vec<f64>> {
    if alpha.shape() != x.shape() || alpha.grid() != x.grid() {
        return Err(invalid("control field and state paths differ in shape or grid"));
    }
    let grid = alpha.grid();
    let n = grid.n_steps();
    let dt = grid.dt();
    let n_paths = alpha.shape().n_paths;
    // step-outer to follow the storage; each path still sums k = 0, 1, ...
    let mut running = vec![0.0; n_paths];
    for k in 0..n {
        let t = grid.time(k);
        for (path, r) in running.iter_mut().enumerate() {
            *r += pb.running_cost(t, x.at(path, k), alpha.at(path, k));
        }
    }
    let mut out = Vec::with_capacity(n_paths);
    for (path, r) in running.into_iter().enumerate() {
        let c = r * dt + pb.terminal_cost(x.terminal(path));
        if !c.is_finite() {
            return Err(Error::NumericalBlowup {
                path,
                step: n,
                what: "non-finite path cost".to_string(),
            });
        }
        out.push(c);
    }
    Ok(out)
}

/// Estimator of `J(α)`.
pub fn estimate_cost<P: ControlProblem + ?Sized>(
    pb: &P,
    alpha: &ControlField,
    x: &StatePaths,
) -> Result<f64> {
    Ok(stats::mean(&path_costs(pb, alpha, x)?))
}

/// Estimator of `J(α)` and its Monte Carlo standard error.
pub fn estimate_cost_with_stderr<P: ControlProblem + ?Sized>(
    pb: &P,
    alpha: &ControlField,
    x: &StatePaths,
) -> Result<(f64, f64)> {
    Ok(stats::mean_and_stderr(&path_costs(pb, alpha, x)?))
}

/// Simulates and evaluates `J(α)` in one go.
pub fn cost_of<P: ControlProblem + ?Sized>(
    pb: &P,
    alpha: &ControlField,
    w: &BrownianEnsemble,
) -> Result<f64> {
    let x = simulate_forward(pb, alpha, w)?;
    estimate_cost(pb, alpha, &x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{EnsembleShape, TimeGrid};
    use crate::models::{example_lq_modified, LqParams};
    use crate::problem::Dims;

    /// `b = drift`, `σ = 0`, `f = run`, `g(x) = term·x²`.
    struct Frozen {
        x0: [f64; 1],
        drift: f64,
        run: f64,
        term: f64,
    }

    impl ControlProblem for Frozen {
        fn dims(&self) -> Dims {
            Dims { d: 1, d_w: 1, p: 1 }
        }
        fn x0(&self) -> &[f64] {
            &self.x0
        }
        fn drift(&self, _: f64, _: &[f64], _: &[f64], o: &mut [f64]) {
            o[0] = self.drift;
        }
        fn diffusion(&self, _: f64, _: &[f64], _: &[f64], o: &mut [f64]) {
            o[0] = 0.0;
        }
        fn running_cost(&self, _: f64, _: &[f64], _: &[f64]) -> f64 {
            self.run
        }
        fn terminal_cost(&self, x: &[f64]) -> f64 {
            self.term * x[0] * x[0]
        }
        fn drift_dx(&self, _: f64, _: &[f64], _: &[f64], o: &mut [f64]) {
            o[0] = 0.0;
        }
        fn drift_da(&self, _: f64, _: &[f64], _: &[f64], o: &mut [f64]) {
            o[0] = 0.0;
        }
        fn diffusion_dx(&self, _: f64, _: &[f64], _: &[f64], o: &mut [f64]) {
            o[0] = 0.0;
        }
        fn diffusion_da(&self, _: f64, _: &[f64], _: &[f64], o: &mut [f64]) {
            o[0] = 0.0;
        }
        fn running_cost_dx(&self, _: f64, _: &[f64], _: &[f64], o: &mut [f64]) {
            o[0] = 0.0;
        }
        fn running_cost_da(&self, _: f64, _: &[f64], _: &[f64], o: &mut [f64]) {
            o[0] = 0.0;
        }
        fn terminal_cost_dx(&self, x: &[f64], o: &mut [f64]) {
            o[0] = 2.0 * self.term * x[0];
        }
        fn drift_daa(&self, _: f64, _: &[f64], _: &[f64], o: &mut [f64]) {
            o[0] = 0.0;
        }
        fn running_cost_daa(&self, _: f64, _: &[f64], _: &[f64], o: &mut [f64]) {
            o[0] = 0.0;
        }
    }

    fn setup(n_paths: usize, horizon: f64, n_steps: usize, seed: u64) -> (ControlField, BrownianEnsemble) {
        let shape = EnsembleShape::scalar(n_paths).unwrap();
        let grid = TimeGrid::new(horizon, n_steps).unwrap();
        (
            ControlField::zeros(shape, grid),
            BrownianEnsemble::sample(seed, shape, grid),
        )
    }

    #[test]
    fn frozen_dynamics_keep_x0() {
        let pb = Frozen { x0: [0.7], drift: 0.0, run: 0.0, term: 0.0 };
        let (alpha, w) = setup(5, 1.0, 10, 1);
        let x = simulate_forward(&pb, &alpha, &w).unwrap();
        assert!(x.values().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn unit_drift_reaches_one() {
        let pb = Frozen { x0: [0.0], drift: 1.0, run: 0.0, term: 0.0 };
        let (alpha, w) = setup(3, 1.0, 100, 1);
        let x = simulate_forward(&pb, &alpha, &w).unwrap();
        for path in 0..3 {
            assert!((x.terminal(path)[0] - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn constant_and_terminal_costs() {
        let (alpha, w) = setup(4, 2.5, 7, 1);
        let pb = Frozen { x0: [2.0], drift: 0.0, run: 1.0, term: 0.0 };
        let x = simulate_forward(&pb, &alpha, &w).unwrap();
        assert!((estimate_cost(&pb, &alpha, &x).unwrap() - 2.5).abs() < 1e-14);
        let pb = Frozen { x0: [2.0], drift: 0.0, run: 0.0, term: 1.0 };
        let x = simulate_forward(&pb, &alpha, &w).unwrap();
        assert_eq!(estimate_cost(&pb, &alpha, &x).unwrap(), 4.0);
    }

    fn deterministic_lq(a: f64, x0: f64) -> crate::models::ScalarModel {
        example_lq_modified(LqParams {
            a,
            b: 0.0,
            beta: 0.0,
            c: 0.0,
            d: 0.0,
            gamma: 0.0,
            x0,
            ..LqParams::default()
        })
        .unwrap()
    }

    #[test]
    fn euler_converges_to_exponential() {
        let pb = deterministic_lq(1.0, 1.0);
        let (alpha, w) = setup(1, 1.0, 10_000, 1);
        let x = simulate_forward(&pb, &alpha, &w).unwrap();
        let err = (x.terminal(0)[0] - core::f64::consts::E).abs();
        assert!(err <= 2e-4, "{err}");
    }

    #[test]
    fn deterministic_cost_matches_quadrature() {
        // X_t = x0 e^{At} stays inside |x| ≤ 1, so J = ∫ ½L X² dt + ½N X_T².
        let (a, x0) = (0.2, 0.5);
        let pb = deterministic_lq(a, x0);
        // Euler's O(dt) bias is about 2.4e-3 at 50 steps
        let (alpha, w) = setup(1, 1.0, 200, 1);
        let j = cost_of(&pb, &alpha, &w).unwrap();
        let fine = 500;
        let h = 1.0 / fine as f64;
        let xt = |t: f64| x0 * libm::exp(a * t);
        let mut integral = 0.0;
        for i in 0..fine {
            let (l, r) = (xt(i as f64 * h), xt((i + 1) as f64 * h));
            integral += 0.5 * h * 0.5 * (l * l + r * r);
        }
        let oracle = integral + 0.5 * xt(1.0) * xt(1.0);
        assert!((j - oracle).abs() / oracle <= 1e-3, "{j} vs {oracle}");
    }

    #[test]
    fn adapted_to_past_noise() {
        let pb = example_lq_modified(LqParams::default()).unwrap();
        let (alpha, w) = setup(20, 1.0, 16, 3);
        let x = simulate_forward(&pb, &alpha, &w).unwrap();
        for k in [0, 5, 15] {
            let w2 = w.with_future_replaced(k, 99);
            let x2 = simulate_forward(&pb, &alpha, &w2).unwrap();
            for path in 0..20 {
                for j in 0..=k {
                    assert_eq!(x.at(path, j), x2.at(path, j));
                }
            }
            assert_ne!(x.terminal(0), x2.terminal(0));
        }
    }

    #[test]
    fn strong_order_under_levy_refinement() {
        let pb = example_lq_modified(LqParams::default()).unwrap();
        let shape = EnsembleShape::scalar(2000).unwrap();
        let finest = TimeGrid::new(1.0, 512).unwrap();
        let wf = BrownianEnsemble::sample(8, shape, finest);
        let terminal = |factor: usize| -> Vec<f64> {
            let w = wf.coarsened(factor).unwrap();
            let alpha = ControlField::constant(shape, *w.grid(), &[0.3]).unwrap();
            let x = simulate_forward(&pb, &alpha, &w).unwrap();
            (0..2000).map(|p| x.terminal(p)[0]).collect()
        };
        let mut pairs = Vec::new();
        for factor in [64, 32, 16, 8] {
            let (c, f) = (terminal(factor), terminal(factor / 2));
            let e: Vec<f64> = c.iter().zip(&f).map(|(a, b)| (a - b).abs()).collect();
            pairs.push((factor as f64 / 512.0, stats::mean(&e)));
        }
        let fit = crate::analysis::fit_rate(&pairs).unwrap();
        assert!((0.4..=1.1).contains(&fit.slope), "{fit:?}");
    }

    #[test]
    fn state_distance_is_controlled_by_control_distance() {
        let pb = example_lq_modified(LqParams::default()).unwrap();
        let (_, w) = setup(500, 1.0, 50, 4);
        let shape = *w.shape();
        let grid = *w.grid();
        let mut rng = crate::rng::Stream::new(3, 3);
        let mut ratios = Vec::new();
        for _ in 0..10 {
            let (c0, c1, c2) = (rng.normal(), rng.normal(), rng.normal());
            let al = ControlField::from_fn(shape, grid, |p, k, o| {
                o[0] = c0 + c1 * w.value_at(p, k)[0] + c2 * grid.time(k)
            });
            let (e0, e1) = (rng.normal(), rng.normal());
            let be = ControlField::from_fn(shape, grid, |p, k, o| {
                o[0] = e0 + e1 * w.value_at(p, k)[0]
            });
            let xa = simulate_forward(&pb, &al, &w).unwrap();
            let xb = simulate_forward(&pb, &be, &w).unwrap();
            let sup: Vec<f64> = (0..shape.n_paths)
                .map(|p| {
                    (0..=grid.n_steps())
                        .map(|k| (xa.at(p, k)[0] - xb.at(p, k)[0]).powi(2))
                        .fold(0.0, f64::max)
                })
                .collect();
            let dist = crate::field::control_distance(&al, &be).unwrap();
            ratios.push(stats::mean(&sup) / (dist * dist));
        }
        // one constant for all pairs: the largest ratio, no pair above it
        let c = ratios.iter().cloned().fold(0.0, f64::max);
        assert!(c.is_finite() && c > 0.0);
        assert!(ratios.iter().all(|r| *r <= 1.1 * c));
    }

    #[test]
    fn blowup_is_reported() {
        let pb = Frozen { x0: [0.0], drift: 1e12, run: 0.0, term: 0.0 };
        let (alpha, w) = setup(2, 1.0, 4, 1);
        match simulate_forward(&pb, &alpha, &w) {
            Err(Error::NumericalBlowup { path: 0, step: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let pb = Frozen { x0: [0.0], drift: 0.0, run: 0.0, term: 0.0 };
        let (alpha, _) = setup(2, 1.0, 4, 1);
        let (_, w) = setup(3, 1.0, 4, 1);
        assert!(simulate_forward(&pb, &alpha, &w).is_err());
    }
}
