//! Run-configuration files and the pipeline from a parsed configuration to
//! ready-to-run controllers.
//!
//! The format is TOML with explicit matrix literals (arrays of row arrays).
//! Parsing is two-stage: a raw pass with every section optional, then a
//! validation pass that reports every problem at once instead of stopping at
//! the first.
//!
//! Units: the plant matrices live in normalized coordinates. The `[scaling]`
//! section carries the affine per-state map `physical = offset + scale *
//! normalized`; state bounds and reference schedules are written in physical
//! units and converted on load. Inputs and disturbances are normalized.

use crate::ambiguity::{self, AmbiguitySpec, SampleLayout};
use crate::controller::{Controller, ControllerMode, MpcConfig};
use crate::lin_sys::{
    solve_dare, solve_lyapunov, steady_state_target, CostSpec, LinearSystem, TerminalIngredients,
};
use crate::polytope::{max_rpi_set, power_support, Polytope};
use crate::simlab::{
    ClosedLoopSetup, GeneratorSpec, MixtureComponent, ReferenceSegment, ScalingMap,
};
use crate::solver::SolverSettings;
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {err}")]
    Io { path: String, err: String },
    #[error("cannot parse {path}: {err}")]
    Parse { path: String, err: String },
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Validation(Vec<String>),
    #[error("building controllers failed: {0}")]
    Build(String),
}

// ---------------------------------------------------------------------------
// raw (serde) layer: everything optional so validation can list all problems

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    system: Option<RawSystem>,
    scaling: Option<RawScaling>,
    constraints: Option<RawConstraints>,
    disturbance: Option<RawDisturbance>,
    ambiguity: Option<RawAmbiguity>,
    horizon: Option<RawHorizon>,
    cost: Option<RawCost>,
    controller: Option<RawController>,
    solver: Option<RawSolver>,
    simulation: Option<RawSimulation>,
    reference: Option<RawReference>,
    feasible_grid: Option<RawGrid>,
}

#[derive(Debug, Deserialize)]
struct RawSystem {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    d: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct RawScaling {
    state_offset: Vec<f64>,
    state_scale: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct RawConstraints {
    state_lower_phys: Vec<f64>,
    state_upper_phys: Vec<f64>,
    input_lower: Vec<f64>,
    input_upper: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct RawDisturbance {
    support_file: Option<String>,
    support_margin: Option<f64>,
    h_mat: Option<Vec<Vec<f64>>>,
    h_vec: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct RawAmbiguity {
    epsilon: f64,
    alpha: f64,
    samples: String,
    samples_layout: Option<String>,
    n_samples: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct RawHorizon {
    n_h: usize,
}

#[derive(Debug, Deserialize)]
struct RawCost {
    q: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
struct RawController {
    mode: String,
    recursive_feasibility: bool,
    #[serde(default)]
    sample_refresh: bool,
    /// input weight for the terminal-gain Riccati solve (defaults to the
    /// stage cost weight); a heavier weight detunes the fixed tube gain
    terminal_gain_r: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
struct RawSolver {
    tol_feas: Option<f64>,
    tol_gap: Option<f64>,
    max_iter: Option<u32>,
}

#[derive(Debug, Deserialize)]
struct RawSimulation {
    t_steps: usize,
    runs: usize,
    seed: u64,
    x0_phys: Option<Vec<f64>>,
    generator: RawGenerator,
}

#[derive(Debug, Deserialize)]
struct RawGenerator {
    kind: String,
    mean: Option<Vec<f64>>,
    std: Option<Vec<f64>>,
    components: Option<Vec<RawComponent>>,
    /// factor by which the rejection region is inflated beyond the
    /// identified support (1.0 keeps every draw inside the support; larger
    /// values model a process whose tail exceeds the identified margins)
    support_inflation: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct RawComponent {
    weight: f64,
    mean: Vec<f64>,
    std: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct RawReference {
    tracked_states: Vec<usize>,
    schedule_phys: Vec<RawSegment>,
}

#[derive(Debug, Deserialize)]
struct RawSegment {
    from_step: usize,
    values: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct RawGrid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    counts: Vec<usize>,
}

// ---------------------------------------------------------------------------
// validated layer

#[derive(Debug, Clone)]
pub struct SimulationBlock {
    pub t_steps: usize,
    pub runs: usize,
    pub seed: u64,
    /// initial state in physical units (default: first steady state)
    pub x0_phys: Option<DVector<f64>>,
    pub generator: GeneratorSpec,
    /// rejection region inflation relative to the identified support
    pub support_inflation: f64,
}

#[derive(Debug, Clone)]
pub struct ReferenceBlock {
    pub tracked: Vec<usize>,
    /// `(from_step, tracked-output values in physical units)`
    pub schedule_phys: Vec<(usize, DVector<f64>)>,
}

#[derive(Debug, Clone)]
pub struct GridBlock {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub counts: Vec<usize>,
}

/// A fully validated run configuration in solver-ready units.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub sys: LinearSystem,
    pub scaling: ScalingMap,
    pub state_lo_phys: DVector<f64>,
    pub state_hi_phys: DVector<f64>,
    pub input_con: Polytope,
    pub w_single: Polytope,
    pub epsilon: f64,
    pub alpha: f64,
    pub n_h: usize,
    pub samples: Vec<DVector<f64>>,
    /// resolved path of the sample file (kept for layout overrides)
    pub samples_path: String,
    pub cost: CostSpec,
    pub mode: ControllerMode,
    pub recursive_feasibility: bool,
    pub sample_refresh: bool,
    /// input weight used when solving for the terminal gain
    pub terminal_gain_r: Option<DMatrix<f64>>,
    pub settings: SolverSettings,
    pub sim: SimulationBlock,
    pub reference: ReferenceBlock,
    pub grid: Option<GridBlock>,
}

fn to_dmatrix(rows: &[Vec<f64>], key: &str, problems: &mut Vec<String>) -> Option<DMatrix<f64>> {
    if rows.is_empty() {
        problems.push(format!("{}: matrix has no rows", key));
        return None;
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        problems.push(format!("{}: ragged matrix literal", key));
        return None;
    }
    Some(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Parse and validate a configuration file. All validation failures are
/// collected and reported together.
pub fn parse_config(path: &str) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.into(), err: e.to_string() })?;
    let raw: RawConfig = toml::from_str(&text)
        .map_err(|e| ConfigError::Parse { path: path.into(), err: e.to_string() })?;
    let base_dir = Path::new(path).parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    validate(raw, &base_dir)
}

fn resolve(base: &PathBuf, rel: &str) -> String {
    let p = Path::new(rel);
    if p.is_absolute() {
        rel.to_string()
    } else {
        base.join(rel).to_string_lossy().into_owned()
    }
}

fn validate(raw: RawConfig, base_dir: &PathBuf) -> Result<RunConfig, ConfigError> {
    let mut problems: Vec<String> = Vec::new();
    macro_rules! require {
        ($field:expr, $name:literal) => {
            match $field {
                Some(v) => Some(v),
                None => {
                    problems.push(format!("missing [{}] section", $name));
                    None
                }
            }
        };
    }
    let system = require!(raw.system, "system");
    let scaling = require!(raw.scaling, "scaling");
    let constraints = require!(raw.constraints, "constraints");
    let disturbance = require!(raw.disturbance, "disturbance");
    let amb = require!(raw.ambiguity, "ambiguity");
    let horizon = require!(raw.horizon, "horizon");
    let cost_raw = require!(raw.cost, "cost");
    let controller = require!(raw.controller, "controller");
    let simulation = require!(raw.simulation, "simulation");
    let reference = require!(raw.reference, "reference");

    let mut sys = None;
    if let Some(s) = &system {
        let a = to_dmatrix(&s.a, "system.a", &mut problems);
        let b = to_dmatrix(&s.b, "system.b", &mut problems);
        let d = to_dmatrix(&s.d, "system.d", &mut problems);
        if let (Some(a), Some(b), Some(d)) = (a, b, d) {
            if b.nrows() != a.nrows() || d.nrows() != a.nrows() || !a.is_square() {
                problems.push(format!(
                    "dimension mismatch between system.a ({}x{}), system.b ({}x{}) and system.d ({}x{})",
                    a.nrows(), a.ncols(), b.nrows(), b.ncols(), d.nrows(), d.ncols()
                ));
            } else {
                match LinearSystem::new(a, b, d) {
                    Ok(s) => sys = Some(s),
                    Err(e) => problems.push(format!("system: {}", e)),
                }
            }
        }
    }
    let n_x = sys.as_ref().map(|s| s.n_x()).unwrap_or(0);
    let n_u = sys.as_ref().map(|s| s.n_u()).unwrap_or(0);
    let n_w = sys.as_ref().map(|s| s.n_w()).unwrap_or(0);

    let mut scale_map = None;
    if let (Some(sc), Some(_)) = (&scaling, &sys) {
        if sc.state_offset.len() != n_x || sc.state_scale.len() != n_x {
            problems.push("scaling.state_offset/state_scale must have one entry per state".into());
        } else if sc.state_scale.iter().any(|&s| s <= 0.0) {
            problems.push("scaling.state_scale entries must be positive".into());
        } else {
            scale_map =
                Some(ScalingMap { offset: sc.state_offset.clone(), scale: sc.state_scale.clone() });
        }
    }

    let mut state_lo = None;
    let mut state_hi = None;
    let mut input_con = None;
    if let (Some(c), Some(_)) = (&constraints, &sys) {
        if c.state_lower_phys.len() != n_x || c.state_upper_phys.len() != n_x {
            problems.push("constraints.state_lower_phys/state_upper_phys need one entry per state".into());
        } else {
            state_lo = Some(DVector::from_vec(c.state_lower_phys.clone()));
            state_hi = Some(DVector::from_vec(c.state_upper_phys.clone()));
        }
        if c.input_lower.len() != n_u || c.input_upper.len() != n_u {
            problems.push("constraints.input_lower/input_upper need one entry per input".into());
        } else {
            match Polytope::from_box(&c.input_lower, &c.input_upper) {
                Ok(p) => input_con = Some(p),
                Err(e) => problems.push(format!("constraints: {}", e)),
            }
        }
    }

    let mut w_single = None;
    if let (Some(d), Some(_)) = (&disturbance, &sys) {
        match (&d.h_mat, &d.h_vec, &d.support_file) {
            (Some(m), Some(v), None) => {
                if let Some(mm) = to_dmatrix(m, "disturbance.h_mat", &mut problems) {
                    if mm.ncols() != n_w || v.len() != mm.nrows() {
                        problems.push("disturbance.h_mat/h_vec dimensions mismatch".into());
                    } else {
                        match Polytope::new(mm, DVector::from_vec(v.clone())) {
                            Ok(p) => w_single = Some(p),
                            Err(e) => problems.push(format!("disturbance: {}", e)),
                        }
                    }
                }
            }
            (None, None, Some(file)) => {
                let margin = d.support_margin.unwrap_or(0.05);
                let full = resolve(base_dir, file);
                match ambiguity::load_trajectories(&full, SampleLayout::PerStep, n_w.max(1), 1) {
                    Ok(raw_samples) => {
                        match ambiguity::identify_support(&raw_samples, margin) {
                            Ok(p) => w_single = Some(p),
                            Err(e) => problems.push(format!("disturbance support: {}", e)),
                        }
                    }
                    Err(e) => problems.push(format!("disturbance.support_file: {}", e)),
                }
            }
            _ => problems.push(
                "disturbance needs either h_mat + h_vec or support_file (+ support_margin)".into(),
            ),
        }
    }

    let mut horizon_n = None;
    if let Some(h) = &horizon {
        if h.n_h < 1 {
            problems.push("horizon.n_h must be at least 1".into());
        } else {
            horizon_n = Some(h.n_h);
        }
    }

    let mut samples = None;
    let mut samples_path = String::new();
    let mut eps_alpha = None;
    if let (Some(a), Some(n_h)) = (&amb, horizon_n) {
        if !(a.alpha > 0.0 && a.alpha < 1.0) {
            problems.push("ambiguity.alpha must lie in (0, 1)".into());
        }
        if a.epsilon < 0.0 {
            problems.push("ambiguity.epsilon must be nonnegative".into());
        }
        eps_alpha = Some((a.epsilon, a.alpha));
        let layout = match a.samples_layout.as_deref() {
            None | Some("trajectory") => Some(SampleLayout::Trajectory),
            Some("per-step") => Some(SampleLayout::PerStep),
            Some(other) => {
                problems.push(format!(
                    "ambiguity.samples_layout must be 'trajectory' or 'per-step', got '{}'",
                    other
                ));
                None
            }
        };
        if let Some(layout) = layout {
            let full = resolve(base_dir, &a.samples);
            samples_path = full.clone();
            match ambiguity::load_trajectories(&full, layout, n_w.max(1), n_h) {
                Ok(s) => {
                    if let Some(expect) = a.n_samples {
                        if s.len() != expect {
                            problems.push(format!(
                                "ambiguity.samples: file holds {} trajectories, n_samples says {}",
                                s.len(),
                                expect
                            ));
                        }
                    }
                    samples = Some(s);
                }
                Err(e) => problems.push(format!("ambiguity.samples: {}", e)),
            }
        }
    }

    let mut cost = None;
    if let (Some(c), Some(_)) = (&cost_raw, &sys) {
        let q = to_dmatrix(&c.q, "cost.q", &mut problems);
        let r = to_dmatrix(&c.r, "cost.r", &mut problems);
        if let (Some(q), Some(r)) = (q, r) {
            if q.nrows() != n_x || r.nrows() != n_u {
                problems.push("cost.q/cost.r dimensions must match the system".into());
            } else {
                match CostSpec::new(q, r) {
                    Ok(c) => cost = Some(c),
                    Err(e) => problems.push(format!("cost: {}", e)),
                }
            }
        }
    }

    let mut mode = None;
    let mut rf = false;
    let mut refresh = false;
    let mut terminal_gain_r = None;
    if let Some(c) = &controller {
        mode = match c.mode.as_str() {
            "dadr" => Some(ControllerMode::DaDr),
            "tube" => Some(ControllerMode::Tube),
            other => {
                problems.push(format!("controller.mode must be 'dadr' or 'tube', got '{}'", other));
                None
            }
        };
        rf = c.recursive_feasibility;
        refresh = c.sample_refresh;
        if let Some(rt) = &c.terminal_gain_r {
            if let Some(m) = to_dmatrix(rt, "controller.terminal_gain_r", &mut problems) {
                if m.nrows() != n_u || m.ncols() != n_u {
                    problems.push("controller.terminal_gain_r must be n_u x n_u".into());
                } else {
                    terminal_gain_r = Some(m);
                }
            }
        }
    }

    let mut settings = SolverSettings::default();
    if let Some(s) = &raw.solver {
        if let Some(v) = s.tol_feas {
            settings.tol_feas = v;
        }
        if let Some(v) = s.tol_gap {
            settings.tol_gap = v;
        }
        if let Some(v) = s.max_iter {
            settings.max_iter = v;
        }
    }

    let mut sim = None;
    if let (Some(s), Some(_)) = (&simulation, &sys) {
        let generator = match s.generator.kind.as_str() {
            "truncated-gaussian" => match (&s.generator.mean, &s.generator.std) {
                (Some(m), Some(sd)) if m.len() == n_w && sd.len() == n_w => {
                    Some(GeneratorSpec::TruncatedGaussian {
                        mean: DVector::from_vec(m.clone()),
                        std: DVector::from_vec(sd.clone()),
                    })
                }
                _ => {
                    problems.push(
                        "generator kind 'truncated-gaussian' needs mean and std with one entry per disturbance".into(),
                    );
                    None
                }
            },
            "uniform" => Some(GeneratorSpec::UniformSupport),
            "mixture" => match &s.generator.components {
                Some(parts) if !parts.is_empty() => {
                    let mut comps = Vec::new();
                    let mut ok = true;
                    for (i, p) in parts.iter().enumerate() {
                        if p.mean.len() != n_w || p.std.len() != n_w {
                            problems.push(format!(
                                "generator component {}: mean/std need one entry per disturbance",
                                i
                            ));
                            ok = false;
                        } else {
                            comps.push(MixtureComponent {
                                weight: p.weight,
                                mean: DVector::from_vec(p.mean.clone()),
                                std: DVector::from_vec(p.std.clone()),
                            });
                        }
                    }
                    let total: f64 = comps.iter().map(|c| c.weight).sum();
                    if ok && (total - 1.0).abs() > 1e-9 {
                        problems.push("generator mixture weights must sum to 1".into());
                        ok = false;
                    }
                    ok.then_some(GeneratorSpec::Mixture(comps))
                }
                _ => {
                    problems.push("generator kind 'mixture' needs a nonempty components list".into());
                    None
                }
            },
            other => {
                problems.push(format!(
                    "generator.kind must be 'truncated-gaussian', 'uniform' or 'mixture', got '{}'",
                    other
                ));
                None
            }
        };
        if let Some(x0) = &s.x0_phys {
            if x0.len() != n_x {
                problems.push("simulation.x0_phys needs one entry per state".into());
            }
        }
        let inflation = s.generator.support_inflation.unwrap_or(1.0);
        if inflation < 1.0 {
            problems.push("generator.support_inflation must be at least 1".into());
        }
        if let Some(generator) = generator {
            sim = Some(SimulationBlock {
                t_steps: s.t_steps,
                runs: s.runs,
                seed: s.seed,
                x0_phys: s.x0_phys.as_ref().map(|v| DVector::from_vec(v.clone())),
                generator,
                support_inflation: inflation,
            });
        }
    }

    let mut reference_block = None;
    if let (Some(r), Some(_)) = (&reference, &sys) {
        if r.tracked_states.iter().any(|&i| i >= n_x) {
            problems.push("reference.tracked_states has an index beyond the state dimension".into());
        } else if r.schedule_phys.is_empty() {
            problems.push("reference.schedule_phys must have at least one segment".into());
        } else if r.schedule_phys[0].from_step != 0 {
            problems.push("reference.schedule_phys must start at step 0".into());
        } else if r.schedule_phys.iter().any(|s| s.values.len() != r.tracked_states.len()) {
            problems.push("reference segment value counts must match tracked_states".into());
        } else {
            reference_block = Some(ReferenceBlock {
                tracked: r.tracked_states.clone(),
                schedule_phys: r
                    .schedule_phys
                    .iter()
                    .map(|s| (s.from_step, DVector::from_vec(s.values.clone())))
                    .collect(),
            });
        }
    }

    let grid = raw.feasible_grid.as_ref().and_then(|g| {
        if g.lower.len() != n_x || g.upper.len() != n_x || g.counts.len() != n_x {
            problems.push("feasible_grid lower/upper/counts need one entry per state".into());
            None
        } else {
            Some(GridBlock { lower: g.lower.clone(), upper: g.upper.clone(), counts: g.counts.clone() })
        }
    });

    if !problems.is_empty() {
        return Err(ConfigError::Validation(problems));
    }
    Ok(RunConfig {
        sys: sys.unwrap(),
        scaling: scale_map.unwrap(),
        state_lo_phys: state_lo.unwrap(),
        state_hi_phys: state_hi.unwrap(),
        input_con: input_con.unwrap(),
        w_single: w_single.unwrap(),
        epsilon: eps_alpha.unwrap().0,
        alpha: eps_alpha.unwrap().1,
        n_h: horizon_n.unwrap(),
        samples: samples.unwrap(),
        samples_path,
        cost: cost.unwrap(),
        mode: mode.unwrap(),
        recursive_feasibility: rf,
        sample_refresh: refresh,
        terminal_gain_r,
        settings,
        sim: sim.unwrap(),
        reference: reference_block.unwrap(),
        grid,
    })
}

impl RunConfig {
    /// State bounds in normalized coordinates.
    pub fn state_bounds_norm(&self) -> (DVector<f64>, DVector<f64>) {
        let lo = self.scaling.to_normalized(&self.state_lo_phys);
        let hi = self.scaling.to_normalized(&self.state_hi_phys);
        (lo, hi)
    }

    /// Tracking selector matrix for the configured tracked states.
    pub fn c_track(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.reference.tracked.len(), self.sys.n_x());
        for (row, &idx) in self.reference.tracked.iter().enumerate() {
            c[(row, idx)] = 1.0;
        }
        c
    }

    /// Terminal gain and cost (reference independent). The gain solves the
    /// infinite-horizon Riccati equation with an optionally detuned input
    /// weight; the terminal cost always satisfies the Lyapunov equation for
    /// the stage cost actually optimized.
    pub fn terminal_gain_and_cost(&self) -> Result<(DMatrix<f64>, DMatrix<f64>), ConfigError> {
        let gain_cost = match &self.terminal_gain_r {
            Some(r) => CostSpec::new(self.cost.q.clone(), r.clone())
                .map_err(|e| ConfigError::Build(e.to_string()))?,
            None => self.cost.clone(),
        };
        let dare =
            solve_dare(&self.sys, &gain_cost).map_err(|e| ConfigError::Build(e.to_string()))?;
        let a_cl = &self.sys.a + &self.sys.b * &dare.k_f;
        let q_tilde = &self.cost.q + dare.k_f.transpose() * &self.cost.r * &dare.k_f;
        let p = solve_lyapunov(&a_cl, &q_tilde).map_err(|e| ConfigError::Build(e.to_string()))?;
        Ok((dare.k_f, p))
    }

    /// Build the controller for one reference segment, in coordinates shifted
    /// to the segment's steady state.
    pub fn build_segment(
        &self,
        from_step: usize,
        ref_phys: &DVector<f64>,
        mode: ControllerMode,
        recursive_feasibility: bool,
    ) -> Result<ReferenceSegment, ConfigError> {
        let build = |e: String| ConfigError::Build(e);
        let ref_norm = DVector::from_fn(ref_phys.len(), |j, _| {
            let idx = self.reference.tracked[j];
            (ref_phys[j] - self.scaling.offset[idx]) / self.scaling.scale[idx]
        });
        let ss = steady_state_target(&self.sys, &self.c_track(), &ref_norm)
            .map_err(|e| build(e.to_string()))?;
        let (lo_n, hi_n) = self.state_bounds_norm();
        let state_shifted = Polytope::from_box(
            &(0..self.sys.n_x()).map(|i| lo_n[i] - ss.x_s[i]).collect::<Vec<_>>(),
            &(0..self.sys.n_x()).map(|i| hi_n[i] - ss.x_s[i]).collect::<Vec<_>>(),
        )
        .map_err(|e| build(e.to_string()))?;
        let input_shifted = Polytope::new(
            self.input_con.m.clone(),
            &self.input_con.b - &self.input_con.m * &ss.u_s,
        )
        .map_err(|e| build(e.to_string()))?;
        let (k_f, p) = self.terminal_gain_and_cost()?;
        let a_cl = &self.sys.a + &self.sys.b * &k_f;
        let x_f = max_rpi_set(&a_cl, &self.sys.d, &self.w_single, &state_shifted, &input_shifted, &k_f)
            .map_err(|e| build(format!("terminal set: {}", e)))?;
        let support = power_support(&self.w_single, self.n_h);
        let spec = AmbiguitySpec::new(self.samples.clone(), self.epsilon, self.alpha, support)
            .map_err(|e| build(e.to_string()))?;
        let cfg = MpcConfig {
            sys: self.sys.clone(),
            cost: self.cost.clone(),
            spec,
            w_single: self.w_single.clone(),
            n_h: self.n_h,
            terminal: TerminalIngredients { k_f, p, x_f },
            mode,
            recursive_feasibility,
            state_con: state_shifted,
            input_con: input_shifted,
            settings: self.settings,
        };
        let controller = Controller::new(cfg).map_err(|e| build(e.to_string()))?;
        Ok(ReferenceSegment {
            from_step,
            reference: ref_norm,
            x_s: ss.x_s,
            u_s: ss.u_s,
            controller: Arc::new(controller),
        })
    }

    /// Full closed-loop setup for the configured schedule.
    pub fn closed_loop_setup(
        &self,
        mode: ControllerMode,
        check_candidates: bool,
    ) -> Result<ClosedLoopSetup, ConfigError> {
        let mut segments = Vec::new();
        for (from, vals) in &self.reference.schedule_phys {
            segments.push(self.build_segment(*from, vals, mode, self.recursive_feasibility)?);
        }
        Ok(ClosedLoopSetup { sys: self.sys.clone(), segments, check_candidates })
    }

    /// Initial state in normalized absolute coordinates (defaults to the
    /// steady state of the first segment).
    pub fn x0_norm(&self, setup: &ClosedLoopSetup) -> DVector<f64> {
        match &self.sim.x0_phys {
            Some(x0) => self.scaling.to_normalized(x0),
            None => setup.segments[0].x_s.clone(),
        }
    }

    /// Region the simulation generator rejects into: the identified support,
    /// scaled by the configured inflation factor.
    pub fn draw_region(&self) -> Result<Polytope, ConfigError> {
        crate::polytope::inflate_polytope(&self.w_single, self.sim.support_inflation)
            .map_err(|e| ConfigError::Build(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(name: &str, content: &str) -> String {
        let path = std::env::temp_dir().join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path.to_string_lossy().into_owned()
    }

    #[test]
    fn empty_file_lists_all_required_sections() {
        let path = write_temp("dadr_empty.toml", "");
        let err = parse_config(&path).unwrap_err();
        match err {
            ConfigError::Validation(problems) => {
                for key in [
                    "system",
                    "scaling",
                    "constraints",
                    "disturbance",
                    "ambiguity",
                    "horizon",
                    "cost",
                    "controller",
                    "simulation",
                    "reference",
                ] {
                    assert!(
                        problems.iter().any(|p| p.contains(key)),
                        "missing complaint about [{}]: {:?}",
                        key,
                        problems
                    );
                }
            }
            other => panic!("expected validation error, got {:?}", other),
        }
    }

    #[test]
    fn dimension_mismatch_names_both_keys() {
        let samples = write_temp("dadr_samp.csv", "0.0,0.0\n");
        let toml = format!(
            r#"
[system]
a = [[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]]
b = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
d = [[1.0], [0.0], [0.0]]
[scaling]
state_offset = [0.0, 0.0, 0.0]
state_scale = [1.0, 1.0, 1.0]
[constraints]
state_lower_phys = [-1.0, -1.0, -1.0]
state_upper_phys = [1.0, 1.0, 1.0]
input_lower = [-1.0]
input_upper = [1.0]
[disturbance]
h_mat = [[1.0], [-1.0]]
h_vec = [0.1, 0.1]
[ambiguity]
epsilon = 0.01
alpha = 0.1
samples = "{samples}"
[horizon]
n_h = 2
[cost]
q = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
r = [[1.0]]
[controller]
mode = "dadr"
recursive_feasibility = false
[simulation]
t_steps = 5
runs = 1
seed = 1
generator = {{ kind = "uniform" }}
[reference]
tracked_states = [0]
schedule_phys = [ {{ from_step = 0, values = [0.0] }} ]
"#
        );
        let path = write_temp("dadr_mismatch.toml", &toml);
        let err = parse_config(&path).unwrap_err();
        match err {
            ConfigError::Validation(problems) => {
                let msg = problems.join("\n");
                assert!(
                    msg.contains("system.a") && msg.contains("system.b"),
                    "mismatch message should name both keys: {}",
                    msg
                );
            }
            other => panic!("expected validation error, got {:?}", other),
        }
    }
}
