//! Acceptance suite: one line per criterion, in order.
//!
//! Runs at desk scale (`n_steps = 50`, `10⁴`–`10⁵` paths) and takes several
//! minutes in release mode. The process exits non-zero if any criterion fails.

use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use gradflow::output::msa_trace_csv;
use gradflow_core::analysis::{
    integral_energy_check, random_adapted_control, reference_optimum, verify_exponential_rate, verify_gradient_vanishing,
    verify_sublinear_rate, verify_tau_rate, verify_tau_rate_exact, ReferenceOptimum,
};
use gradflow_core::bsde::{
    relative_rms, solve_adjoint_lq_analytic, solve_adjoint_lsmc, AffineFeedback, LqOracle, RegressionBasis,
};
use gradflow_core::flow::{
    energy_identity_check, gap_bound_check, run_gradient_flow, FlowConfig,
};
use gradflow_core::models::{
    example_logistic, example_lq_modified, example_quartic, quadratic_toy, LogisticParams, LqParams, ScalarModel,
};
use gradflow_core::msa::{gateaux_check, run_msa, MsaConfig};
use gradflow_core::problem::{check_derivatives, hamiltonian, CheckBox};
use gradflow_core::prox::{prox_step_point, ProxSettings, UpdateMode};
use gradflow_core::rng::Stream;
use gradflow_core::sde::simulate_closed_loop;
use gradflow_core::{BrownianEnsemble, ControlField, ControlProblem, EnsembleShape, TimeGrid};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn ensemble(n_paths: usize, seed: u64) -> BrownianEnsemble {
    BrownianEnsemble::sample(seed, EnsembleShape::scalar(n_paths).unwrap(), TimeGrid::new(1.0, 50).unwrap())
}

fn constant(w: &BrownianEnsemble, v: f64) -> ControlField {
    ControlField::constant(*w.shape(), *w.grid(), &[v]).unwrap()
}

fn ex1() -> ScalarModel {
    example_lq_modified(LqParams::default()).unwrap()
}

fn ex2() -> ScalarModel {
    example_quartic(LqParams::default()).unwrap()
}

fn ex3() -> ScalarModel {
    example_logistic(LogisticParams::default()).unwrap()
}

/// Shared Example 1 setup for the rate criteria.
struct Ex1Rates {
    w: BrownianEnsemble,
    alpha0: ControlField,
    opt: ReferenceOptimum,
}

fn ex1_rates() -> Ex1Rates {
    let w = ensemble(10_000, 42);
    let alpha0 = constant(&w, 1.0);
    let opt = reference_optimum(&ex1(), &alpha0, &w, 1.0, 200, 1e-13, &FlowConfig::default()).unwrap();
    Ex1Rates { w, alpha0, opt }
}

fn criterion_1() -> Verdict {
    let w = ensemble(10_000, 42);
    let cfg = MsaConfig {
        tau0: 0.02,
        max_outer: 100,
        ..MsaConfig::default()
    };
    let mut detail = Vec::new();
    let mut pass = true;
    for (name, pb, a0) in [("ex1", ex1(), 1.0), ("ex2", ex2(), 0.9)] {
        let rep = run_msa(&pb, &constant(&w, a0), &w, &cfg).unwrap();
        let j = rep.costs();
        let iters = j.len() - 1;
        let monotone = j.windows(2).all(|p| p[1] <= p[0]);
        pass &= monotone && iters >= 100;
        detail.push(format!("{name}: {iters} iterations, non-increasing {monotone}, J {:.6} -> {:.6}", j[0], j[iters]));
    }
    verdict(pass, detail.join("; "))
}

fn criterion_2() -> Verdict {
    let w = ensemble(100_000, 42);
    let traj = run_gradient_flow(&ex1(), &constant(&w, 1.0), &w, 0.05, 1e-3, UpdateMode::Explicit, &FlowConfig::default())
        .unwrap();
    let rep = energy_identity_check(&traj).unwrap();
    let ex1_err = rep.max_rel_err.unwrap_or(f64::INFINITY);

    let wt = ensemble(1000, 42);
    let a0 = random_adapted_control(&wt, 1, 1.0);
    let toy = run_gradient_flow(&quadratic_toy(0.0).unwrap(), &a0, &wt, 0.5, 1e-3, UpdateMode::Explicit, &FlowConfig::default())
        .unwrap();
    let toy_rep = energy_identity_check(&toy).unwrap();
    let toy_err = toy_rep.max_rel_err.unwrap_or(f64::INFINITY);
    verdict(
        ex1_err <= 0.1 && toy_err <= 0.02,
        format!(
            "ex1 max rel err {ex1_err:.3e} over {} nodes (tol 1e-1); toy {toy_err:.3e} over {} nodes (tol 2e-2)",
            rep.eligible, toy_rep.eligible
        ),
    )
}

fn criterion_3(r: &Ex1Rates) -> Verdict {
    let traj = run_gradient_flow(&ex1(), &r.alpha0, &r.w, 2.0, 0.01, UpdateMode::Explicit, &FlowConfig::default()).unwrap();
    let rep = integral_energy_check(&traj, f64::INFINITY);
    verdict(
        rep.integral_ok,
        format!(
            "integral {:.6} vs decrease {:.6}, rel err {:.3e} (tol 1e-1)",
            rep.integral, rep.decrease, rep.integral_rel_err
        ),
    )
}

fn criterion_4(r: &Ex1Rates) -> Verdict {
    let taus = [0.1, 0.05, 0.025];
    let rep = verify_tau_rate(&ex1(), &r.alpha0, &r.w, 1.0, &taus, &FlowConfig::default()).unwrap();

    let toy = quadratic_toy(0.0).unwrap();
    let wt = ensemble(1000, 42);
    let a0 = random_adapted_control(&wt, 2, 1.0);
    let exact = |s: f64| Ok(a0.scaled((-2.0 * s).exp()));
    let toy_rep = verify_tau_rate_exact(&toy, &a0, &wt, 1.0, &taus, &FlowConfig::default(), exact).unwrap();
    let (s1, s2) = (rep.fit.slope, toy_rep.fit.slope);
    verdict(
        (0.7..=1.3).contains(&s1) && (0.9..=1.1).contains(&s2),
        format!("ex1 slope {s1:.3} (band [0.7, 1.3]); toy slope {s2:.3} (band [0.9, 1.1])"),
    )
}

fn criterion_5(r: &Ex1Rates) -> Verdict {
    let rep = verify_sublinear_rate(
        &ex1(),
        &r.alpha0,
        &r.w,
        &[1.0, 2.0, 4.0, 8.0],
        0.02,
        UpdateMode::Implicit,
        &FlowConfig::default(),
        &r.opt.control,
    )
    .unwrap();
    let cells: Vec<String> = rep
        .gaps
        .iter()
        .zip(&rep.envelope)
        .map(|(g, e)| format!("S={}: {:.2e} <= {:.2e} + 3*{:.1e}", g.s, g.gap, e, g.stderr))
        .collect();
    verdict(rep.all_ok(), format!("J* {:.6}; {}", r.opt.cost, cells.join(", ")))
}

fn criterion_6(r: &Ex1Rates) -> Verdict {
    let s_list = [0.5, 1.0, 1.5, 2.0];
    let toy = quadratic_toy(0.0).unwrap();
    let wt = ensemble(1000, 42);
    let a0 = random_adapted_control(&wt, 3, 1.0);
    let zero = ControlField::zeros(*wt.shape(), *wt.grid());
    let toy_rep = verify_exponential_rate(&toy, &a0, &wt, &s_list, 0.01, UpdateMode::Explicit, &FlowConfig::default(), &zero, 0.0, 2.0)
        .unwrap();
    // ‖α_s‖² = ‖α0‖² e^{−4s}
    let toy_slope = toy_rep.control_fit.slope;
    let toy_ok = (toy_slope + 4.0).abs() <= 0.4;

    let pb = ex1();
    let eta = pb.strong_convexity().unwrap();
    let rep = verify_exponential_rate(
        &pb,
        &r.alpha0,
        &r.w,
        &s_list,
        0.02,
        UpdateMode::Implicit,
        &FlowConfig::default(),
        &r.opt.control,
        r.opt.cost,
        eta,
    )
    .unwrap();
    let (a, b) = (rep.cost_fit.slope, rep.control_fit.slope);
    verdict(
        toy_ok && rep.ok(),
        format!(
            "toy control-gap slope {toy_slope:.3} (analytic -4); ex1 slopes J {a:.3} (r2 {:.3}), control {b:.3} (r2 {:.3})",
            rep.cost_fit.r_squared, rep.control_fit.r_squared
        ),
    )
}

fn criterion_7() -> Verdict {
    let w = ensemble(10_000, 42);
    let rep = verify_gradient_vanishing(
        &ex2(),
        &constant(&w, 0.9),
        &w,
        &[2.0, 5.0, 10.0],
        0.01,
        UpdateMode::Explicit,
        &FlowConfig::default(),
        1e-3,
    )
    .unwrap();
    let trace: Vec<String> = rep.grad_at.iter().map(|(s, g)| format!("S={s}: {g:.2e}")).collect();
    verdict(rep.final_ok, format!("grad_norm_sq {} (tol 1e-3)", trace.join(", ")))
}

fn criterion_8() -> Verdict {
    let p = LqParams::default();
    let pb = example_lq_modified(p).unwrap();
    let fb = AffineFeedback { gain: -0.5, offset: 0.1 };
    let basis = RegressionBasis::default();
    let w = ensemble(100_000, 42);
    let (alpha, x) = simulate_closed_loop(&pb, &w, |_, x, a| a[0] = fb.eval(x[0])).unwrap();
    let sol = solve_adjoint_lsmc(&pb, &alpha, &x, &w, &basis).unwrap();
    let exact = solve_adjoint_lq_analytic(&p, fb, &x, LqOracle::Continuous).unwrap();
    let (ey, ez) = relative_rms(&sol, &exact).unwrap();
    let stochastic_ok = ey <= 0.02 && ez <= 0.05;

    let pd = LqParams { c: 0.0, d: 0.0, gamma: 0.0, ..p };
    let pbd = example_lq_modified(pd).unwrap();
    let wd = ensemble(1000, 42);
    let (alpha, x) = simulate_closed_loop(&pbd, &wd, |_, x, a| a[0] = fb.eval(x[0])).unwrap();
    let sol = solve_adjoint_lsmc(&pbd, &alpha, &x, &wd, &basis).unwrap();
    let ode = solve_adjoint_lq_analytic(&pd, fb, &x, LqOracle::Continuous).unwrap();
    let (dy, _) = relative_rms(&sol, &ode).unwrap();
    let discrete = solve_adjoint_lq_analytic(&pd, fb, &x, LqOracle::Discrete).unwrap();
    let (dd, _) = relative_rms(&sol, &discrete).unwrap();
    verdict(
        stochastic_ok && dy <= 1e-3,
        format!(
            "stochastic rel rms Y {ey:.3e} (tol 2e-2), Z {ez:.3e} (tol 5e-2); deterministic vs ODE {dy:.3e} (tol 1e-3), \
             vs Euler recursion {dd:.1e}"
        ),
    )
}

fn criterion_9() -> Verdict {
    let w = ensemble(10_000, 42);
    let basis = RegressionBasis::default();
    let mut worst: f64 = 0.0;
    let mut pass = true;
    let mut count = 0;
    for (i, pb) in [ex1(), ex2(), ex3()].iter().enumerate() {
        let alpha = random_adapted_control(&w, 100 + i as u64, 0.4);
        for j in 0..10 {
            let v = random_adapted_control(&w, 1000 + 10 * i as u64 + j, 1.0);
            let r = gateaux_check(pb, &alpha, &v, &w, &basis, 1e-4).unwrap();
            pass &= r.ok;
            count += 1;
            worst = worst.max((r.finite_difference - r.adjoint).abs() / r.tolerance);
        }
    }
    verdict(pass, format!("{count} directions, worst |fd - adjoint| / tolerance {worst:.3}"))
}

fn criterion_10() -> Verdict {
    let w = ensemble(10_000, 42);
    let pb = ex1();
    let mut pass = true;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..10 {
        let beta = random_adapted_control(&w, 2 * i, 0.5);
        let theta = random_adapted_control(&w, 2 * i + 1, 0.5);
        let r = gap_bound_check(&pb, &w, &RegressionBasis::default(), &beta, &theta).unwrap();
        pass &= r.satisfied;
        worst = worst.max((r.lhs - r.rhs) / r.stderr.max(f64::MIN_POSITIVE));
    }
    verdict(pass, format!("10 pairs, largest (lhs - rhs) / stderr {worst:.2} (limit 3)"))
}

fn criterion_11() -> Verdict {
    let models = [ex1(), ex2(), ex3(), quadratic_toy(0.5).unwrap()];
    let mut notes = Vec::new();

    // progressive measurability under a future-noise splice
    let shape = EnsembleShape::scalar(300).unwrap().with_regression_paths(500);
    let grid = TimeGrid::new(1.0, 20).unwrap();
    let w = BrownianEnsemble::sample(3, shape, grid);
    let a0 = ControlField::zeros(shape, grid);
    let cfg = MsaConfig {
        backtrack: false,
        stop_dj: f64::NEG_INFINITY,
        max_outer: 5,
        ..MsaConfig::default()
    };
    let mut measurable = true;
    for from in [1, 7, 15] {
        let spliced = w.with_future_replaced(from, 99);
        let a = run_msa(&ex1(), &a0, &w, &cfg).unwrap().control;
        let b = run_msa(&ex1(), &a0, &spliced, &cfg).unwrap().control;
        let fa = run_gradient_flow(&ex1(), &a0, &w, 0.3, 0.1, UpdateMode::Explicit, &FlowConfig::default()).unwrap();
        let fb = run_gradient_flow(&ex1(), &a0, &spliced, 0.3, 0.1, UpdateMode::Explicit, &FlowConfig::default()).unwrap();
        for path in 0..shape.n_paths {
            for k in 0..=from {
                measurable &= a.at(path, k) == b.at(path, k);
                measurable &= fa.final_control().at(path, k) == fb.final_control().at(path, k);
            }
        }
    }
    notes.push(format!("measurable {measurable}"));

    // prox first-order optimality and λ-monotonicity on random draws
    let mut rng = Stream::new(11, 0xACC);
    let mut worst_residual: f64 = 0.0;
    let mut monotone = true;
    for pb in &models {
        let lam = pb.lambda_hint();
        let tau = if lam > 0.0 { 0.9 / lam } else { 0.5 };
        // the quartic cost has a kink at |a| = 1, so its pairs stay inside
        let a_range = if pb.name() == "quartic" { 1.0 } else { 3.0 };
        for _ in 0..100 {
            let t = rng.uniform();
            let x = [rng.uniform_in(-2.0, 2.0)];
            let y = [rng.uniform_in(-3.0, 3.0)];
            let z = [rng.uniform_in(-2.0, 2.0)];
            let a_prev = [rng.uniform_in(-2.0, 2.0)];
            let a = prox_step_point(pb, t, &x, &y, &z, &a_prev, tau, ProxSettings::default()).unwrap();
            let g = hamiltonian(pb, t, &x, &y, &z, &a).unwrap().grad_a[0];
            worst_residual = worst_residual.max((g + (a[0] - a_prev[0]) / tau).abs());

            let (u, v) = (rng.uniform_in(-a_range, a_range), rng.uniform_in(-a_range, a_range));
            let gu = hamiltonian(pb, t, &x, &y, &z, &[u]).unwrap().grad_a[0];
            let gv = hamiltonian(pb, t, &x, &y, &z, &[v]).unwrap().grad_a[0];
            monotone &= (u - v) * (gu - gv) >= -lam * (u - v) * (u - v) - 1e-12;
        }
    }
    notes.push(format!("prox residual {worst_residual:.1e}"));
    notes.push(format!("lambda-monotone {monotone}"));

    // seed reproducibility of the written trace
    let trace = |seed: u64| {
        let w = ensemble(2000, seed);
        let cfg = MsaConfig {
            max_outer: 10,
            ..MsaConfig::default()
        };
        msa_trace_csv(&run_msa(&ex1(), &constant(&w, 1.0), &w, &cfg).unwrap().records)
    };
    let reproducible = trace(5) == trace(5) && trace(5) != trace(6);
    notes.push(format!("reproducible {reproducible}"));

    let worst_derivative = models
        .iter()
        .map(|pb| check_derivatives(pb, 200, 7, CheckBox::default()).unwrap().max_error())
        .fold(0.0, f64::max);
    notes.push(format!("derivative error {worst_derivative:.1e}"));

    verdict(
        measurable && worst_residual <= 1e-10 && monotone && reproducible && worst_derivative <= 1e-6,
        notes.join(", "),
    )
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--quiet`; a name filter
    // that matches nothing here skips the suite.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return ExitCode::SUCCESS;
    }
    let started = Instant::now();
    let mut rates: Option<Ex1Rates> = None;
    let mut failed = Vec::new();
    let mut out = std::io::stdout();
    for n in 1..=11 {
        let t = Instant::now();
        let v = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            7 => criterion_7(),
            8 => criterion_8(),
            9 => criterion_9(),
            10 => criterion_10(),
            11 => criterion_11(),
            _ => {
                let r = rates.get_or_insert_with(ex1_rates);
                match n {
                    3 => criterion_3(r),
                    4 => criterion_4(r),
                    5 => criterion_5(r),
                    _ => criterion_6(r),
                }
            }
        };
        let status = if v.pass { "PASS" } else { "FAIL" };
        writeln!(
            out,
            "criterion {n:>2}: {status} ({:.1}s) {}",
            t.elapsed().as_secs_f64(),
            v.detail
        )
        .unwrap();
        out.flush().unwrap();
        if !v.pass {
            failed.push(n);
        }
    }
    writeln!(out, "acceptance finished in {:.0}s", started.elapsed().as_secs_f64()).unwrap();
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        writeln!(out, "failed: {failed:?}").unwrap();
        ExitCode::FAILURE
    }
}
