//! Cross-module checks of the assembled constraint blocks against brute
//! force: random-disturbance violation sweeps, the zero-radius CVaR
//! consistency check, and the step-ahead tail re-solve at disturbance
//! vertices.

use dadr_mpc::ambiguity::{dual_worstcase_value, empirical_cvar, AffinePiece, AmbiguitySpec};
use dadr_mpc::controller::{solve_step, Controller, ControllerMode, MpcConfig};
use dadr_mpc::lin_sys::{
    build_prediction_matrices, solve_dare, solve_lyapunov, CostSpec, LinearSystem,
    TerminalIngredients,
};
use dadr_mpc::polytope::{max_rpi_set, power_support, Polytope};
use dadr_mpc::solver::{SolverSettings, Status};
use nalgebra::{dmatrix, dvector, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

/// Scalar configuration with real disturbance coupling; horizon 3.
fn scalar_cfg(epsilon: f64, rf: bool) -> MpcConfig {
    let sys = LinearSystem::new(dmatrix![0.9], dmatrix![1.0], dmatrix![1.0]).unwrap();
    let cost = CostSpec::new(dmatrix![1.0], dmatrix![0.5]).unwrap();
    let dare = solve_dare(&sys, &cost).unwrap();
    let a_cl = &sys.a + &sys.b * &dare.k_f;
    let q_tilde = &cost.q + dare.k_f.transpose() * &cost.r * &dare.k_f;
    let p = solve_lyapunov(&a_cl, &q_tilde).unwrap();
    let w_single = Polytope::from_box(&[-0.1], &[0.1]).unwrap();
    let state_con = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
    let input_con = Polytope::from_box(&[-0.6], &[0.6]).unwrap();
    let x_f = max_rpi_set(&a_cl, &sys.d, &w_single, &state_con, &input_con, &dare.k_f).unwrap();
    let n_h = 3;
    let support = power_support(&w_single, n_h);
    let samples = vec![
        dvector![0.05, -0.02, 0.0],
        dvector![-0.08, 0.03, 0.06],
        dvector![0.01, 0.09, -0.04],
        dvector![-0.03, 0.0, 0.08],
    ];
    let spec = AmbiguitySpec::new(samples, epsilon, 0.2, support).unwrap();
    MpcConfig {
        sys,
        cost,
        spec,
        w_single,
        n_h,
        terminal: TerminalIngredients { k_f: dare.k_f, p, x_f },
        mode: ControllerMode::DaDr,
        recursive_feasibility: rf,
        state_con,
        input_con,
        settings: SolverSettings::default(),
    }
}

#[test]
fn solved_policy_never_violates_robust_blocks() {
    let cfg = scalar_cfg(0.02, true);
    let mut rng = ChaCha12Rng::seed_from_u64(71);
    let pred = build_prediction_matrices(&cfg.sys, cfg.n_h).unwrap();
    for &x0 in &[0.0, 0.35, -0.5] {
        let res = solve_step(&cfg, &dvector![x0], None).unwrap();
        assert_eq!(res.status, Status::Optimal);
        let policy = &res.policy;
        for _ in 0..1000 {
            let w = DVector::from_fn(cfg.n_h, |_, _| rng.gen_range(-0.1..0.1));
            let u = policy.inputs(&w);
            for i in 0..u.len() {
                assert!(
                    u[i].abs() <= 0.6 + 1e-7,
                    "input bound violated at x0 = {}: u[{}] = {}",
                    x0,
                    i,
                    u[i]
                );
            }
            let x_stack =
                &pred.l_x * dvector![x0] + &pred.l_u * &u + &pred.l_w * &w;
            let x_term = x_stack[(cfg.n_h - 1) * cfg.sys.n_x()];
            assert!(
                cfg.terminal.x_f.contains(&dvector![x_term], 1e-7),
                "terminal violated at x0 = {}: x_N = {}",
                x0,
                x_term
            );
        }
    }
}

#[test]
fn zero_radius_solution_has_nonpositive_empirical_cvar() {
    let cfg = scalar_cfg(0.0, false);
    let pred = build_prediction_matrices(&cfg.sys, cfg.n_h).unwrap();
    for &x0 in &[0.2, 0.8, -0.7] {
        let res = solve_step(&cfg, &dvector![x0], None).unwrap();
        assert_eq!(res.status, Status::Optimal);
        let policy = &res.policy;
        let losses: Vec<f64> = cfg
            .spec
            .samples
            .iter()
            .map(|w| {
                let u = policy.inputs(w);
                let x_stack = &pred.l_x * dvector![x0] + &pred.l_u * &u + &pred.l_w * w;
                // chance rows cover steps 1..N_h-1, upper and lower bounds
                let mut worst = f64::NEG_INFINITY;
                for step in 1..cfg.n_h {
                    let xs = x_stack[step - 1];
                    worst = worst.max(xs - 1.0).max(-xs - 1.0);
                }
                worst
            })
            .collect();
        let cvar = empirical_cvar(&losses, cfg.spec.alpha);
        assert!(cvar <= 1e-6, "x0 = {}: empirical CVaR {} > 0", x0, cvar);
    }
}

/// Worst-case CVaR of `max_j (const_j + a_j' w)` through the ambiguity
/// module (dual route plus a ternary search over the epigraph shift).
fn worstcase_cvar(
    consts: &[f64],
    coefs: &[DVector<f64>],
    spec: &AmbiguitySpec,
) -> f64 {
    let phi = |t: f64| {
        let pieces: Vec<AffinePiece> = consts
            .iter()
            .zip(coefs)
            .map(|(&b, a)| AffinePiece { a: a.clone(), b: b + t })
            .chain(std::iter::once(AffinePiece { a: DVector::zeros(spec.dim()), b: 0.0 }))
            .collect();
        dual_worstcase_value(&pieces, spec).unwrap() / spec.alpha - t
    };
    let (mut lo, mut hi) = (-4.0, 4.0);
    for _ in 0..70 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if phi(m1) < phi(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    phi(0.5 * (lo + hi))
}

#[test]
fn step_ahead_tail_remains_feasible_at_first_step_vertices() {
    // Solve with the step-ahead blocks active, then re-check: for random
    // vertex realizations of the first disturbance, the remaining chance
    // constraints still pass a worst-case CVaR evaluation with the frozen
    // policy.
    let cfg = scalar_cfg(0.02, true);
    let pred = build_prediction_matrices(&cfg.sys, cfg.n_h).unwrap();
    let ctrl = Controller::new(cfg).unwrap();
    let cfg = &ctrl.cfg;
    let x0 = 0.4;
    let res = ctrl.step(&dvector![x0]).unwrap();
    assert_eq!(res.status, Status::Optimal);
    let c = &res.policy.c;
    let v = res.policy.v();

    let rows = ctrl.chance_rows();
    let tail_support = power_support(&cfg.w_single, cfg.n_h - 1);
    let tail_spec = cfg.spec.slice_steps(1, 1, cfg.n_h - 1, tail_support).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(97);
    let vertices = [-0.1, 0.1];
    for _ in 0..200 {
        let w0 = vertices[rng.gen_range(0..2)];
        let mut consts = Vec::new();
        let mut coefs = Vec::new();
        for row in rows.iter().filter(|r| r.step > 1) {
            let a_full = &row.v_map * &v + &row.f_w;
            let const_j = row.f_x.dot(&dvector![x0]) + row.f_u.dot(c) + a_full[0] * w0 - row.rhs;
            consts.push(const_j);
            coefs.push(a_full.rows(1, cfg.n_h - 1).into_owned());
        }
        let cvar = worstcase_cvar(&consts, &coefs, &tail_spec);
        assert!(cvar <= 1e-6, "tail CVaR {} > 0 after w0 = {}", cvar, w0);
    }
    let _ = pred;
}
