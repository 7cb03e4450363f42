//! Quick timing probe: template instantiation vs QP solve on the bundled
//! engine configuration.
//!
//!     cargo run -p dadr-cli --example bench_step --release

use dadr_mpc::config::parse_config;
use dadr_mpc::controller::ControllerMode;
use dadr_mpc::solver;
use nalgebra::dvector;
use std::time::Instant;

fn main() {
    let cfg = parse_config("configs/gcai.toml").expect("config");
    let (from, ref_phys) = cfg.reference.schedule_phys[0].clone();
    let seg = cfg.build_segment(from, &ref_phys, ControllerMode::DaDr, true).expect("segment");
    let x = dvector![0.15, -0.1, 0.05];

    let t0 = Instant::now();
    let assembled = seg.controller.problem_at(&x).unwrap();
    let t_build = t0.elapsed();
    println!(
        "problem: {} vars, {} ineq rows, {} eq rows, {} nnz",
        assembled.problem.n_vars,
        assembled.problem.a_ineq.nrows,
        assembled.problem.a_eq.nrows,
        assembled.problem.a_ineq.entries.len()
    );

    let t1 = Instant::now();
    let sol = solver::solve_qp(&assembled.problem, &cfg.settings).unwrap();
    let t_solve = t1.elapsed();
    println!("instantiate {:?}, solve {:?} ({} iters, status {:?})", t_build, t_solve, sol.iterations, sol.status);

    let t2 = Instant::now();
    let n = 20;
    for _ in 0..n {
        let a = seg.controller.problem_at(&x).unwrap();
        let _ = solver::solve_qp(&a.problem, &cfg.settings).unwrap();
    }
    println!("avg step {:?}", t2.elapsed() / n);
}
