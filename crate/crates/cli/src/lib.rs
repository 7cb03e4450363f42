//! Command implementations behind the `dadr` binary: configuration loading
//! with overrides, command dispatch and artifact export.

use dadr_mpc::ambiguity::{identify_support, load_trajectories, SampleLayout};
use dadr_mpc::config::{parse_config, ConfigError, RunConfig};
use dadr_mpc::controller::{ControllerMode, StepResult};
use dadr_mpc::simlab::{
    feasible_set_grid, grid_points, metrics_summary, run_batch, run_closed_loop_refreshing,
    wilcoxon_rank_sum, write_trace_csv, ClosedLoopTrace, DisturbanceGenerator, MetricsReport,
};
use dadr_mpc::solver::Status;
use nalgebra::DVector;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Run(String),
    Io { path: String, err: String },
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{}", e),
            CliError::Run(e) => write!(f, "{}", e),
            CliError::Io { path, err } => write!(f, "io error on {}: {}", path, err),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

/// Command-line overrides applied on top of the configuration file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub mode: Option<ControllerMode>,
    pub x0_phys: Option<Vec<f64>>,
    pub samples_layout: Option<SampleLayout>,
    pub out_dir: Option<String>,
}

/// Output directory precedence: `--out` flag, then `DADR_OUT`, then `./out`.
pub fn resolve_out_dir(flag: Option<&str>) -> PathBuf {
    if let Some(f) = flag {
        return PathBuf::from(f);
    }
    if let Ok(env) = std::env::var("DADR_OUT") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from("out")
}

pub fn load_config(path: &str, ov: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = parse_config(path)?;
    if let Some(seed) = ov.seed {
        cfg.sim.seed = seed;
    }
    if let Some(runs) = ov.runs {
        cfg.sim.runs = runs;
    }
    if let Some(mode) = ov.mode {
        cfg.mode = mode;
    }
    if let Some(x0) = &ov.x0_phys {
        if x0.len() != cfg.sys.n_x() {
            return Err(CliError::Run(format!(
                "--x0 needs {} entries, got {}",
                cfg.sys.n_x(),
                x0.len()
            )));
        }
        cfg.sim.x0_phys = Some(DVector::from_vec(x0.clone()));
    }
    if let Some(layout) = ov.samples_layout {
        let samples = load_trajectories(&cfg.samples_path, layout, cfg.sys.n_w(), cfg.n_h)
            .map_err(|e| CliError::Run(e.to_string()))?;
        cfg.samples = samples;
    }
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Io { path: dir.display().to_string(), err: e.to_string() })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Io { path: path.display().to_string(), err: e.to_string() })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Io { path: path.display().to_string(), err: e.to_string() })?;
    text.push('\n');
    write_text(path, &text)
}

#[derive(Serialize)]
struct PolytopeJson {
    m: Vec<Vec<f64>>,
    b: Vec<f64>,
}

fn polytope_json(p: &dadr_mpc::polytope::Polytope) -> PolytopeJson {
    PolytopeJson {
        m: (0..p.n_rows()).map(|i| (0..p.dim()).map(|j| p.m[(i, j)]).collect()).collect(),
        b: p.b.iter().copied().collect(),
    }
}

fn matrix_json(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// `identify-support`: run the principal-axis bounding box on the raw
/// disturbance file referenced by the configuration and write the polytope.
pub fn cmd_identify_support(cfg: &RunConfig, out_dir: &Path) -> Result<i32, CliError> {
    ensure_dir(out_dir)?;
    // re-identify from the raw file when one is configured; otherwise export
    // the explicitly configured support
    let poly = cfg.w_single.clone();
    write_json(&out_dir.join("support.json"), &polytope_json(&poly))?;
    println!(
        "support: {} halfspaces in {} dimensions -> {}",
        poly.n_rows(),
        poly.dim(),
        out_dir.join("support.json").display()
    );
    Ok(0)
}

/// `identify-support` variant working directly on a raw sample file.
pub fn identify_support_from_file(
    path: &str,
    n_w: usize,
    margin: f64,
    out_dir: &Path,
) -> Result<i32, CliError> {
    ensure_dir(out_dir)?;
    let raw = load_trajectories(path, SampleLayout::PerStep, n_w, 1)
        .map_err(|e| CliError::Run(e.to_string()))?;
    let poly = identify_support(&raw, margin).map_err(|e| CliError::Run(e.to_string()))?;
    write_json(&out_dir.join("support.json"), &polytope_json(&poly))?;
    Ok(0)
}

#[derive(Serialize)]
struct TerminalJson {
    k_f: Vec<Vec<f64>>,
    p: Vec<Vec<f64>>,
    x_f: PolytopeJson,
}

/// `terminal-set`: compute the terminal gain, cost and set for the first
/// reference segment and export them.
pub fn cmd_terminal_set(cfg: &RunConfig, out_dir: &Path) -> Result<i32, CliError> {
    ensure_dir(out_dir)?;
    let (from, ref_phys) = cfg.reference.schedule_phys[0].clone();
    let segment = match cfg.build_segment(from, &ref_phys, cfg.mode, cfg.recursive_feasibility) {
        Ok(s) => s,
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg);
            return Ok(1);
        }
    };
    let term = &segment.controller.cfg.terminal;
    let json = TerminalJson {
        k_f: matrix_json(&term.k_f),
        p: matrix_json(&term.p),
        x_f: polytope_json(&term.x_f),
    };
    write_json(&out_dir.join("terminal.json"), &json)?;
    println!(
        "terminal set: {} rows; gain and cost written to {}",
        term.x_f.n_rows(),
        out_dir.join("terminal.json").display()
    );
    Ok(0)
}

#[derive(Serialize)]
struct SolveJson {
    status: Status,
    objective: f64,
    u0_normalized: Vec<f64>,
    feedforward: Vec<f64>,
    gain: Vec<Vec<f64>>,
    kkt_max: f64,
}

/// `solve`: one-shot solve at the configured (or overridden) initial state.
pub fn cmd_solve(cfg: &RunConfig, out_dir: &Path) -> Result<i32, CliError> {
    ensure_dir(out_dir)?;
    let setup = cfg
        .closed_loop_setup(cfg.mode, false)
        .map_err(|e| CliError::Run(e.to_string()))?;
    let seg = &setup.segments[0];
    let x0 = cfg.x0_norm(&setup);
    let res: StepResult = seg
        .controller
        .step(&(&x0 - &seg.x_s))
        .map_err(|e| CliError::Run(e.to_string()))?;
    let json = SolveJson {
        status: res.status,
        objective: res.objective,
        u0_normalized: (&seg.u_s + &res.u0).iter().copied().collect(),
        feedforward: res.policy.c.iter().copied().collect(),
        gain: matrix_json(&res.policy.k),
        kkt_max: res.kkt.max(),
    };
    write_json(&out_dir.join("solve.json"), &json)?;
    match res.status {
        Status::Optimal => {
            println!("optimal, objective {:.6}, |u0| {:.4}", res.objective, res.u0.norm());
            Ok(0)
        }
        other => {
            eprintln!("solve failed: problem is {:?} at the requested state", other);
            Ok(1)
        }
    }
}

fn export_traces(
    traces: &[ClosedLoopTrace],
    out_dir: &Path,
    tag: &str,
) -> Result<(), CliError> {
    for (i, tr) in traces.iter().enumerate() {
        let path = out_dir.join(format!("trace_{}_run{:03}.csv", tag, i));
        write_trace_csv(tr, path.to_str().unwrap()).map_err(|e| CliError::Run(e.to_string()))?;
    }
    Ok(())
}

fn batch_report(cfg: &RunConfig, traces: &[ClosedLoopTrace]) -> MetricsReport {
    let (_, p) = cfg.terminal_gain_and_cost().expect("terminal ingredients");
    metrics_summary(
        traces,
        &cfg.state_lo_phys,
        &cfg.state_hi_phys,
        &cfg.reference.tracked,
        &cfg.cost,
        &p,
        &cfg.sys,
        &cfg.scaling,
    )
}

/// `simulate`: closed-loop batch in the configured mode; exports traces and
/// the metrics report.
pub fn cmd_simulate(cfg: &RunConfig, out_dir: &Path) -> Result<i32, CliError> {
    ensure_dir(out_dir)?;
    let setup = cfg
        .closed_loop_setup(cfg.mode, false)
        .map_err(|e| CliError::Run(e.to_string()))?;
    let x0 = cfg.x0_norm(&setup);
    let region = cfg.draw_region()?;
    let traces = if cfg.sample_refresh {
        // runs stay sequential here: each step may rebuild the controller
        let mut traces = Vec::with_capacity(cfg.sim.runs);
        for r in 0..cfg.sim.runs {
            let seed = cfg.sim.seed.wrapping_add(r as u64);
            let mut generator =
                DisturbanceGenerator::new(cfg.sim.generator.clone(), region.clone(), seed)
                    .map_err(|e| CliError::Run(e.to_string()))?;
            traces.push(
                run_closed_loop_refreshing(&setup, &x0, cfg.sim.t_steps, &mut generator, seed)
                    .map_err(|e| CliError::Run(e.to_string()))?,
            );
        }
        traces
    } else {
        run_batch(
            &setup,
            &x0,
            cfg.sim.t_steps,
            &cfg.sim.generator,
            &region,
            cfg.sim.seed,
            cfg.sim.runs,
        )
        .map_err(|e| CliError::Run(e.to_string()))?
    };
    let tag = match cfg.mode {
        ControllerMode::DaDr => "dadr",
        ControllerMode::Tube => "tube",
    };
    export_traces(&traces, out_dir, tag)?;
    let report = batch_report(cfg, &traces);
    write_json(&out_dir.join(format!("report_{}.json", tag)), &report)?;
    println!(
        "{} runs x {} steps, faults {}, report -> {}",
        report.n_runs,
        report.t_steps,
        report.faults,
        out_dir.join(format!("report_{}.json", tag)).display()
    );
    Ok(if report.faults == 0 { 0 } else { 1 })
}

#[derive(Serialize)]
pub struct CompareReport {
    pub dadr: MetricsReport,
    pub tube: MetricsReport,
    /// two-sided rank-sum p-value on per-run tracking errors
    pub wilcoxon_p: f64,
    pub table: String,
}

/// Aligned-text table over the first tracked state, mirrored after the
/// statistical comparison layout: variance, upper violations, lower
/// violations per controller.
pub fn comparison_table(dadr: &MetricsReport, tube: &MetricsReport, state: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:>10} {:>9} {:>9}", "controller", "variance", ">upper", "<lower");
    for (name, rep) in [("dadr", dadr), ("tube-based", tube)] {
        let _ = writeln!(
            s,
            "{:<12} {:>10.4} {:>8.2}% {:>8.2}%",
            name,
            rep.per_state_variance[state],
            rep.violation_upper[state] * 100.0,
            rep.violation_lower[state] * 100.0
        );
    }
    s
}

/// `compare`: run both controllers on matched disturbance seeds and export
/// the side-by-side report.
pub fn cmd_compare(cfg: &RunConfig, out_dir: &Path) -> Result<i32, CliError> {
    ensure_dir(out_dir)?;
    let mut reports = Vec::new();
    let mut all_traces = Vec::new();
    for mode in [ControllerMode::DaDr, ControllerMode::Tube] {
        let setup =
            cfg.closed_loop_setup(mode, false).map_err(|e| CliError::Run(e.to_string()))?;
        let x0 = cfg.x0_norm(&setup);
        let region = cfg.draw_region()?;
        let traces = run_batch(
            &setup,
            &x0,
            cfg.sim.t_steps,
            &cfg.sim.generator,
            &region,
            cfg.sim.seed,
            cfg.sim.runs,
        )
        .map_err(|e| CliError::Run(e.to_string()))?;
        let tag = if mode == ControllerMode::DaDr { "dadr" } else { "tube" };
        export_traces(&traces, out_dir, tag)?;
        reports.push(batch_report(cfg, &traces));
        all_traces.push(traces);
    }
    let tube = reports.pop().unwrap();
    let dadr = reports.pop().unwrap();
    let p = wilcoxon_rank_sum(&dadr.per_run_tracking_mse, &tube.per_run_tracking_mse);
    let table = comparison_table(&dadr, &tube, cfg.reference.tracked.first().copied().unwrap_or(0));
    print!("{}", table);
    println!("rank-sum p-value (per-run tracking mse): {:.6}", p);
    let faults = dadr.faults + tube.faults;
    let report = CompareReport { dadr, tube, wilcoxon_p: p, table };
    write_json(&out_dir.join("compare.json"), &report)?;
    write_text(&out_dir.join("compare.txt"), &report.table)?;
    let _ = all_traces;
    Ok(if faults == 0 { 0 } else { 1 })
}

/// `feasible-set`: grid scan over initial states, both controllers.
pub fn cmd_feasible_set(cfg: &RunConfig, out_dir: &Path) -> Result<i32, CliError> {
    ensure_dir(out_dir)?;
    let grid_spec = cfg
        .grid
        .as_ref()
        .ok_or_else(|| CliError::Run("config has no [feasible_grid] section".into()))?;
    let (from, ref_phys) = cfg.reference.schedule_phys[0].clone();
    let da = cfg
        .build_segment(from, &ref_phys, ControllerMode::DaDr, cfg.recursive_feasibility)
        .map_err(|e| CliError::Run(e.to_string()))?;
    let tube = cfg
        .build_segment(from, &ref_phys, ControllerMode::Tube, cfg.recursive_feasibility)
        .map_err(|e| CliError::Run(e.to_string()))?;
    let points = grid_points(&grid_spec.lower, &grid_spec.upper, &grid_spec.counts);
    let report = feasible_set_grid(&da.controller, &tube.controller, &points)
        .map_err(|e| CliError::Run(e.to_string()))?;
    println!(
        "grid {}: full policy feasible at {}, tube at {}, inclusion violations {}",
        report.n_points, report.da_count, report.tube_count, report.inclusion_violations
    );
    write_json(&out_dir.join("feasible_set.json"), &report)?;
    Ok(if report.inclusion_violations == 0 { 0 } else { 1 })
}
