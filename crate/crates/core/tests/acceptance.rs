//! Acceptance suite: one pass/fail line per criterion, run in a fixed order
//! so expensive artifacts (controllers, batches) are shared. The bundled
//! engine configuration drives the closed-loop criteria; the two-state
//! single-input system joins for the feasible-set comparisons.
//!
//! Criterion 8 asserts closed-loop orderings between the two controllers.
//! On this benchmark the two agree to solver tolerance at every visited
//! state (see the notes in the repository README), so its strict parts
//! document the honest outcome rather than a tuned pass.

use dadr_mpc::ambiguity::{
    dual_worstcase_value, empirical_cvar, transport_lp_oracle, AffinePiece, AmbiguitySpec,
};
use dadr_mpc::config::{parse_config, RunConfig};
use dadr_mpc::controller::ControllerMode;
use dadr_mpc::lin_sys::{build_prediction_matrices, LinearSystem};
use dadr_mpc::polytope::{power_support, Polytope};
use dadr_mpc::reformulation::{build_chance_rows, cvar_value_at};
use dadr_mpc::simlab::{
    feasible_set_grid, grid_points, metrics_summary, run_batch, run_closed_loop,
    stability_bound_check, wilcoxon_rank_sum, ClosedLoopSetup, DisturbanceGenerator,
    MetricsReport,
};
use dadr_mpc::solver::Status;
use nalgebra::{dmatrix, dvector, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use std::time::Instant;

fn gcai_config() -> RunConfig {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/gcai.toml");
    parse_config(path).expect("bundled engine configuration must parse")
}

fn toy_config() -> RunConfig {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy2d.toml");
    parse_config(path).expect("bundled toy configuration must parse")
}

struct Outcome {
    failures: Vec<String>,
}

impl Outcome {
    fn check(&mut self, criterion: &str, ok: bool, detail: String) {
        println!("criterion {}: {} - {}", criterion, if ok { "PASS" } else { "FAIL" }, detail);
        if !ok {
            self.failures.push(format!("{}: {}", criterion, detail));
        }
    }
}

/// Regulation setup at the first reference of the bundled configuration.
fn gcai_regulation(
    cfg: &RunConfig,
    mode: ControllerMode,
    rf: bool,
    check_candidates: bool,
) -> ClosedLoopSetup {
    let (from, ref_phys) = cfg.reference.schedule_phys[0].clone();
    let seg = cfg.build_segment(from, &ref_phys, mode, rf).expect("segment builds");
    ClosedLoopSetup { sys: cfg.sys.clone(), segments: vec![seg], check_candidates }
}

fn report_json(report: &MetricsReport) -> String {
    serde_json::to_string(report).expect("metrics serialize")
}

#[test]
fn acceptance_criteria() {
    let mut out = Outcome { failures: Vec::new() };
    let gcai = gcai_config();
    let toy = toy_config();

    // ---------------------------------------------------------------- 1
    // Dual worst-case expectation vs the brute-force transport program.
    {
        let started = Instant::now();
        let mut rng = ChaCha12Rng::seed_from_u64(101);
        let mut worst_gap = 0.0f64;
        let instances = 24;
        for _ in 0..instances {
            let lo = rng.gen_range(-1.2..-0.4);
            let hi = rng.gen_range(0.4..1.2);
            let support = Polytope::from_box(&[lo], &[hi]).unwrap();
            let n = rng.gen_range(1..=3);
            let samples: Vec<DVector<f64>> =
                (0..n).map(|_| dvector![rng.gen_range(lo..hi)]).collect();
            let eps = rng.gen_range(0.0..0.25);
            let spec = AmbiguitySpec::new(samples, eps, 0.1, support).unwrap();
            let pieces: Vec<AffinePiece> = (0..rng.gen_range(2..=3))
                .map(|_| AffinePiece {
                    a: dvector![rng.gen_range(-1.5..1.5)],
                    b: rng.gen_range(-0.5..0.5),
                })
                .collect();
            let max_slope =
                pieces.iter().map(|p| p.a[0].abs()).fold(0.0f64, f64::max).max(1e-9);
            let dual = dual_worstcase_value(&pieces, &spec).unwrap();
            let h = |w: &DVector<f64>| {
                pieces.iter().map(|p| p.a[0] * w[0] + p.b).fold(f64::NEG_INFINITY, f64::max)
            };
            let oracle = transport_lp_oracle(h, &spec, 201).unwrap();
            let spacing = (hi - lo) / 200.0;
            let tol = 2.0 * spacing * max_slope;
            worst_gap = worst_gap.max((dual - oracle).abs() - tol);
        }
        let secs = started.elapsed().as_secs_f64();
        out.check(
            "1 (duality oracle equivalence)",
            worst_gap <= 0.0 && secs < 10.0,
            format!("{} instances, worst excess gap {:.2e}, {:.2} s", instances, worst_gap, secs),
        );
    }

    // ---------------------------------------------------------------- 2
    // Zero-radius collapse of the DR-CVaR block to the empirical CVaR.
    {
        let mut rng = ChaCha12Rng::seed_from_u64(202);
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let a = rng.gen_range(0.4..1.1);
            let sys = LinearSystem::new(dmatrix![a], dmatrix![1.0], dmatrix![1.0]).unwrap();
            let n_h = rng.gen_range(2..=3);
            let pred = build_prediction_matrices(&sys, n_h).unwrap();
            let bound = rng.gen_range(0.7..1.3);
            let state_con = Polytope::new(dmatrix![1.0], dvector![bound]).unwrap();
            let rows = build_chance_rows(&state_con, &pred);
            let w_single = Polytope::from_box(&[-0.3], &[0.3]).unwrap();
            let support = power_support(&w_single, n_h);
            let n = rng.gen_range(2..=5);
            let samples: Vec<DVector<f64>> = (0..n)
                .map(|_| DVector::from_fn(n_h, |_, _| rng.gen_range(-0.3..0.3)))
                .collect();
            let spec =
                AmbiguitySpec::new(samples.clone(), 0.0, rng.gen_range(0.1..0.4), support)
                    .unwrap();
            let n_c = n_h;
            let n_v = dadr_mpc::lin_sys::policy_dim(n_h, 1, 1);
            let x = dvector![rng.gen_range(-0.5..1.2)];
            let c = DVector::from_fn(n_c, |_, _| rng.gen_range(-0.3..0.3));
            let v = DVector::from_fn(n_v, |_, _| rng.gen_range(-0.5..0.5));
            let block_val = cvar_value_at(&x, &rows, &spec, n_c, n_v, &c, &v).unwrap();
            let losses: Vec<f64> = samples
                .iter()
                .map(|w| {
                    rows.iter()
                        .map(|row| {
                            row.f_x.dot(&x)
                                + row.f_u.dot(&c)
                                + (row.v_map.transpose() * w).dot(&v)
                                + row.f_w.dot(w)
                                - row.rhs
                        })
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            let emp = empirical_cvar(&losses, spec.alpha);
            worst = worst.max((block_val - emp).abs());
        }
        out.check(
            "2 (zero-radius CVaR collapse)",
            worst <= 1e-6,
            format!("50 instances, worst discrepancy {:.2e}", worst),
        );
    }

    // ---------------------------------------------------------------- 3+4
    // Recursive feasibility and candidate-shift slack over the engine
    // benchmark, disturbances drawn inside the identified support.
    let c3_traces;
    {
        let started = Instant::now();
        let setup = gcai_regulation(&gcai, ControllerMode::DaDr, true, true);
        let x0 = setup.segments[0].x_s.clone();
        let traces = run_batch(
            &setup,
            &x0,
            50,
            &gcai.sim.generator,
            &gcai.w_single,
            gcai.sim.seed,
            100,
        )
        .expect("batch runs");
        let faults: usize = traces.iter().filter(|t| t.fault_at.is_some()).count();
        let secs = started.elapsed().as_secs_f64();
        out.check(
            "3 (recursive feasibility)",
            faults == 0,
            format!(
                "100 runs x 50 steps, {} faults, {:.0} s on {} cores",
                faults,
                secs,
                rayon::current_num_threads()
            ),
        );
        let worst_candidate = traces
            .iter()
            .flat_map(|t| t.candidate_violations.iter())
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let n_checks: usize = traces.iter().map(|t| t.candidate_violations.len()).sum();
        out.check(
            "4 (candidate-shift feasibility)",
            worst_candidate <= 1e-6,
            format!("{} candidate checks, worst violation {:.2e}", n_checks, worst_candidate),
        );
        c3_traces = traces;
    }

    // ---------------------------------------------------------------- 5
    // Long-run stage cost against the disturbance-covariance bound.
    {
        let started = Instant::now();
        // the step-ahead blocks never bind at regulation; verify on a short
        // prefix, then run the long horizon without them
        let setup_on = gcai_regulation(&gcai, ControllerMode::DaDr, true, false);
        let setup_off = gcai_regulation(&gcai, ControllerMode::DaDr, false, false);
        let x0 = setup_on.segments[0].x_s.clone();
        let mut gen_a =
            DisturbanceGenerator::new(gcai.sim.generator.clone(), gcai.w_single.clone(), 9090)
                .unwrap();
        let mut gen_b =
            DisturbanceGenerator::new(gcai.sim.generator.clone(), gcai.w_single.clone(), 9090)
                .unwrap();
        let short_on = run_closed_loop(&setup_on, &x0, 60, &mut gen_a, 9090).unwrap();
        let short_off = run_closed_loop(&setup_off, &x0, 60, &mut gen_b, 9090).unwrap();
        let max_diff = short_on
            .states
            .iter()
            .zip(&short_off.states)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0f64, f64::max);
        let mut generator =
            DisturbanceGenerator::new(gcai.sim.generator.clone(), gcai.w_single.clone(), 9090)
                .unwrap();
        let trace = run_closed_loop(&setup_off, &x0, 5000, &mut generator, 9090).unwrap();
        let (_, p) = gcai.terminal_gain_and_cost().unwrap();
        let check = stability_bound_check(
            std::slice::from_ref(&trace),
            &gcai.cost,
            &p,
            &gcai.sys,
        );
        let secs = started.elapsed().as_secs_f64();
        out.check(
            "5 (stability bound)",
            check.satisfied && trace.fault_at.is_none() && max_diff < 1e-6,
            format!(
                "T=5000: avg cost {:.4} vs bound {:.4} (x1.10), step-ahead equivalence diff {:.1e}, {:.0} s",
                check.avg_cost, check.bound, max_diff, secs
            ),
        );
    }

    // ---------------------------------------------------------------- 6+7
    // Feasible-set inclusion and objective dominance on both systems.
    let mut spot_kkt = 0.0f64;
    {
        let started = Instant::now();
        let mut total_points = 0;
        let mut violations = 0;
        let mut min_gap = f64::INFINITY;
        let mut counts = Vec::new();
        for cfg in [&gcai, &toy] {
            let (from, ref_phys) = cfg.reference.schedule_phys[0].clone();
            let da = cfg
                .build_segment(from, &ref_phys, ControllerMode::DaDr, cfg.recursive_feasibility)
                .unwrap();
            let tube = cfg
                .build_segment(from, &ref_phys, ControllerMode::Tube, cfg.recursive_feasibility)
                .unwrap();
            let grid_spec = cfg.grid.as_ref().expect("grid configured");
            let grid = grid_points(&grid_spec.lower, &grid_spec.upper, &grid_spec.counts);
            let report = feasible_set_grid(&da.controller, &tube.controller, &grid).unwrap();
            total_points += report.n_points;
            violations += report.inclusion_violations;
            for o in &report.outcomes {
                if let (Some(od), Some(ot)) = (o.da_objective, o.tube_objective) {
                    min_gap = min_gap.min(ot - od);
                }
            }
            counts.push((report.da_count, report.tube_count, report.n_points));
            // KKT spot checks for the audit in criterion 9
            for k in [0usize, grid.len() / 2, grid.len() - 1] {
                let r = da.controller.step(&grid[k]).unwrap();
                if r.status == Status::Optimal {
                    spot_kkt = spot_kkt.max(r.kkt.max());
                }
            }
        }
        let secs = started.elapsed().as_secs_f64();
        let ok_counts = counts.iter().all(|(d, t, _)| d >= t);
        out.check(
            "6 (feasible-set inclusion)",
            violations == 0 && ok_counts && total_points >= 1000,
            format!(
                "{} points, {} inclusion violations, counts {:?} (da, tube, grid), {:.0} s",
                total_points, violations, counts, secs
            ),
        );
        out.check(
            "7 (objective dominance)",
            min_gap >= -1e-7,
            format!("min (tube - full) objective gap {:.2e}", min_gap),
        );
    }

    // ---------------------------------------------------------------- 8
    // Benchmark orderings under the synthetic generator, matched seeds.
    let c8_reports;
    {
        let started = Instant::now();
        let region = gcai.draw_region().unwrap();
        let mut reports = Vec::new();
        for mode in [ControllerMode::DaDr, ControllerMode::Tube] {
            let setup = gcai.closed_loop_setup(mode, false).unwrap();
            let x0 = gcai.x0_norm(&setup);
            let traces = run_batch(
                &setup,
                &x0,
                gcai.sim.t_steps,
                &gcai.sim.generator,
                &region,
                gcai.sim.seed,
                60,
            )
            .unwrap();
            let (_, p) = gcai.terminal_gain_and_cost().unwrap();
            reports.push(metrics_summary(
                &traces,
                &gcai.state_lo_phys,
                &gcai.state_hi_phys,
                &gcai.reference.tracked,
                &gcai.cost,
                &p,
                &gcai.sys,
                &gcai.scaling,
            ));
        }
        let tube = reports.pop().unwrap();
        let dadr = reports.pop().unwrap();
        let p_value = wilcoxon_rank_sum(&dadr.per_run_tracking_mse, &tube.per_run_tracking_mse);
        let secs = started.elapsed().as_secs_f64();
        let var_ok = dadr.per_state_variance[0] < tube.per_state_variance[0];
        let upper_ok = dadr.violation_upper[0] < tube.violation_upper[0];
        let faults_ok = dadr.faults == 0 && tube.faults == 0;
        out.check(
            "8 (benchmark orderings)",
            var_ok && upper_ok && p_value < 0.05 && faults_ok,
            format!(
                "variance {:.4} vs {:.4}, upper {:.2}% vs {:.2}%, lower {:.2}% vs {:.2}%, p = {:.4}, faults {}/{}, {:.0} s",
                dadr.per_state_variance[0],
                tube.per_state_variance[0],
                dadr.violation_upper[0] * 100.0,
                tube.violation_upper[0] * 100.0,
                dadr.violation_lower[0] * 100.0,
                tube.violation_lower[0] * 100.0,
                p_value,
                dadr.faults,
                tube.faults,
                secs
            ),
        );
        c8_reports = (dadr, tube, p_value);
    }

    // ---------------------------------------------------------------- 9
    // KKT audit over every closed-loop solve recorded above. The
    // per-operation examples run in the module unit suites within the same
    // workspace test invocation.
    {
        let trace_kkt = c3_traces
            .iter()
            .map(|t| t.max_kkt)
            .fold(0.0f64, f64::max)
            .max(c8_reports.0.max_kkt)
            .max(c8_reports.1.max_kkt)
            .max(spot_kkt);
        out.check(
            "9 (solver tolerances)",
            trace_kkt <= 1e-7,
            format!("max relative KKT residual across criteria 3-8 solves {:.2e}", trace_kkt),
        );
    }

    // ---------------------------------------------------------------- 10
    // Bitwise determinism of the exported reports for criteria 3 and 8.
    {
        let started = Instant::now();
        let (_, p_term) = gcai.terminal_gain_and_cost().unwrap();
        let metrics_of = |traces: &[dadr_mpc::simlab::ClosedLoopTrace]| {
            metrics_summary(
                traces,
                &gcai.state_lo_phys,
                &gcai.state_hi_phys,
                &gcai.reference.tracked,
                &gcai.cost,
                &p_term,
                &gcai.sys,
                &gcai.scaling,
            )
        };
        let first_c3 = report_json(&metrics_of(&c3_traces));
        let setup = gcai_regulation(&gcai, ControllerMode::DaDr, true, false);
        let x0 = setup.segments[0].x_s.clone();
        let rerun = run_batch(
            &setup,
            &x0,
            50,
            &gcai.sim.generator,
            &gcai.w_single,
            gcai.sim.seed,
            100,
        )
        .unwrap();
        let second_c3 = report_json(&metrics_of(&rerun));

        let region = gcai.draw_region().unwrap();
        let mut second_reports = Vec::new();
        for mode in [ControllerMode::DaDr, ControllerMode::Tube] {
            let setup = gcai.closed_loop_setup(mode, false).unwrap();
            let x0 = gcai.x0_norm(&setup);
            let traces = run_batch(
                &setup,
                &x0,
                gcai.sim.t_steps,
                &gcai.sim.generator,
                &region,
                gcai.sim.seed,
                60,
            )
            .unwrap();
            second_reports.push(metrics_of(&traces));
        }
        let tube2 = second_reports.pop().unwrap();
        let dadr2 = second_reports.pop().unwrap();
        let p2 = wilcoxon_rank_sum(&dadr2.per_run_tracking_mse, &tube2.per_run_tracking_mse);
        let c8_equal = report_json(&c8_reports.0) == report_json(&dadr2)
            && report_json(&c8_reports.1) == report_json(&tube2)
            && c8_reports.2.to_bits() == p2.to_bits();
        let secs = started.elapsed().as_secs_f64();
        out.check(
            "10 (determinism)",
            first_c3 == second_c3 && c8_equal,
            format!(
                "criterion-3 report identical: {}, criterion-8 reports identical: {}, {:.0} s",
                first_c3 == second_c3,
                c8_equal,
                secs
            ),
        );
    }

    assert!(
        out.failures.is_empty(),
        "acceptance criteria failed:\n{}",
        out.failures.join("\n")
    );
}
