//! Closed-loop Monte-Carlo evaluation: seeded disturbance generators,
//! trajectory recording with exact replay, summary metrics, the rank-sum
//! test, the long-run stage-cost bound and feasible-set grid scans.

use crate::controller::{candidate_shift, Controller, ControlError};
use crate::lin_sys::{CostSpec, LinearSystem};
use crate::polytope::{Polytope, PolytopeError};
use crate::solver::Status;
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("initial state infeasible for the controller (status {0:?})")]
    InitialInfeasible(Status),
    #[error("generator acceptance rate below 1e-3 inside the support")]
    GeneratorAcceptance,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("io error on {path}: {err}")]
    Io { path: String, err: String },
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
}

/// Disturbance process description (all draws are rejected into the support).
#[derive(Debug, Clone)]
pub enum GeneratorSpec {
    TruncatedGaussian { mean: DVector<f64>, std: DVector<f64> },
    UniformSupport,
    Mixture(Vec<MixtureComponent>),
}

#[derive(Debug, Clone)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
}

/// Seeded stream of disturbances inside a polytopic support.
pub struct DisturbanceGenerator {
    spec: GeneratorSpec,
    support: Polytope,
    lo: DVector<f64>,
    hi: DVector<f64>,
    rng: ChaCha12Rng,
}

impl DisturbanceGenerator {
    pub fn new(spec: GeneratorSpec, support: Polytope, seed: u64) -> Result<Self, SimError> {
        let (lo, hi) = support.bounding_box()?;
        if let GeneratorSpec::Mixture(parts) = &spec {
            let total: f64 = parts.iter().map(|p| p.weight).sum();
            if parts.is_empty() || (total - 1.0).abs() > 1e-9 {
                return Err(SimError::InvalidInput("mixture weights must sum to one".into()));
            }
        }
        Ok(DisturbanceGenerator { spec, support, lo, hi, rng: ChaCha12Rng::seed_from_u64(seed) })
    }

    fn gaussian_draw(rng: &mut ChaCha12Rng, mean: &DVector<f64>, std: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(mean.len(), |i, _| {
            let z: f64 = rng.sample(StandardNormal);
            mean[i] + std[i] * z
        })
    }

    pub fn next(&mut self) -> Result<DVector<f64>, SimError> {
        const MAX_TRIES: usize = 10_000;
        for _ in 0..MAX_TRIES {
            let cand = match &self.spec {
                GeneratorSpec::TruncatedGaussian { mean, std } => {
                    Self::gaussian_draw(&mut self.rng, mean, std)
                }
                GeneratorSpec::UniformSupport => DVector::from_fn(self.support.dim(), |i, _| {
                    self.rng.gen_range(self.lo[i]..=self.hi[i])
                }),
                GeneratorSpec::Mixture(parts) => {
                    let mut pick: f64 = self.rng.gen_range(0.0..1.0);
                    let mut chosen = &parts[parts.len() - 1];
                    for p in parts {
                        if pick < p.weight {
                            chosen = p;
                            break;
                        }
                        pick -= p.weight;
                    }
                    Self::gaussian_draw(&mut self.rng, &chosen.mean, &chosen.std)
                }
            };
            if self.support.contains(&cand, 1e-12) {
                return Ok(cand);
            }
        }
        Err(SimError::GeneratorAcceptance)
    }
}

/// One reference segment of a closed-loop run: steady-state pair and the
/// controller built for the correspondingly shifted coordinates.
#[derive(Clone)]
pub struct ReferenceSegment {
    pub from_step: usize,
    /// tracked-output reference (normalized absolute coordinates)
    pub reference: DVector<f64>,
    pub x_s: DVector<f64>,
    pub u_s: DVector<f64>,
    pub controller: Arc<Controller>,
}

#[derive(Clone)]
pub struct ClosedLoopSetup {
    pub sys: LinearSystem,
    pub segments: Vec<ReferenceSegment>,
    /// record the worst candidate-policy violation before each re-solve
    pub check_candidates: bool,
}

impl ClosedLoopSetup {
    fn segment_at(&self, step: usize) -> &ReferenceSegment {
        let mut active = &self.segments[0];
        for s in &self.segments {
            if s.from_step <= step {
                active = s;
            }
        }
        active
    }
}

/// Recorded closed-loop run. `states` has `t_steps + 1` entries; inputs,
/// disturbances, statuses and references have `t_steps`. The recorded
/// triples satisfy the plant recursion exactly on replay.
#[derive(Debug, Clone)]
pub struct ClosedLoopTrace {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub disturbances: Vec<DVector<f64>>,
    pub statuses: Vec<Status>,
    pub references: Vec<DVector<f64>>,
    pub x_s: Vec<DVector<f64>>,
    pub u_s: Vec<DVector<f64>>,
    pub objectives: Vec<f64>,
    /// worst candidate violation seen before each re-solve (if enabled)
    pub candidate_violations: Vec<f64>,
    pub max_kkt: f64,
    pub seed: u64,
    pub fault_at: Option<usize>,
}

pub fn run_closed_loop(
    setup: &ClosedLoopSetup,
    x0: &DVector<f64>,
    t_steps: usize,
    generator: &mut DisturbanceGenerator,
    seed: u64,
) -> Result<ClosedLoopTrace, SimError> {
    let mut trace = ClosedLoopTrace {
        states: vec![x0.clone()],
        inputs: Vec::new(),
        disturbances: Vec::new(),
        statuses: Vec::new(),
        references: Vec::new(),
        x_s: Vec::new(),
        u_s: Vec::new(),
        objectives: Vec::new(),
        candidate_violations: Vec::new(),
        max_kkt: 0.0,
        seed,
        fault_at: None,
    };
    let mut x = x0.clone();
    let mut prev: Option<(DVector<f64>, crate::lin_sys::AffinePolicy, usize)> = None;
    for k in 0..t_steps {
        let seg = setup.segment_at(k);
        let x_shift = &x - &seg.x_s;
        if setup.check_candidates {
            if let Some((x_prev_shift, policy, seg_from)) = &prev {
                // candidate certification only holds within one segment
                if *seg_from == seg.from_step {
                    let w = trace.disturbances.last().expect("previous step recorded");
                    let cand = candidate_shift(policy, w, &seg.controller.cfg, x_prev_shift)?;
                    let viol = seg.controller.violation_of(&x_shift, &cand)?;
                    trace.candidate_violations.push(viol);
                }
            }
        }
        let res = seg.controller.step(&x_shift)?;
        trace.statuses.push(res.status);
        trace.objectives.push(res.objective);
        trace.references.push(seg.reference.clone());
        trace.x_s.push(seg.x_s.clone());
        trace.u_s.push(seg.u_s.clone());
        trace.max_kkt = trace.max_kkt.max(res.kkt.max());
        if res.status != Status::Optimal {
            if k == 0 {
                return Err(SimError::InitialInfeasible(res.status));
            }
            trace.fault_at = Some(k);
            return Ok(trace);
        }
        let u = &seg.u_s + &res.u0;
        let w = generator.next()?;
        let x_next = setup.sys.step(&x, &u, &w);
        trace.inputs.push(u);
        trace.disturbances.push(w.clone());
        prev = Some((x_shift, res.policy, seg.from_step));
        trace.states.push(x_next.clone());
        x = x_next;
    }
    Ok(trace)
}

/// Closed-loop run with the ambiguity center re-estimated between steps:
/// once enough disturbances have been observed, the sample set becomes the
/// most recent `n_samples` sliding windows of horizon length. Windows that
/// leave the support (possible when the generator draws beyond it) are
/// skipped. Single-segment setups only; the controller is rebuilt whenever
/// the samples change, so this is much slower than [`run_closed_loop`].
pub fn run_closed_loop_refreshing(
    setup: &ClosedLoopSetup,
    x0: &DVector<f64>,
    t_steps: usize,
    generator: &mut DisturbanceGenerator,
    seed: u64,
) -> Result<ClosedLoopTrace, SimError> {
    if setup.segments.len() != 1 {
        return Err(SimError::InvalidInput(
            "sample refresh supports single-segment schedules only".into(),
        ));
    }
    let base = &setup.segments[0];
    let n_w = setup.sys.n_w();
    let cfg0 = &base.controller.cfg;
    let n_h = cfg0.n_h;
    let n_samples = cfg0.spec.n_samples();
    let mut observed: Vec<DVector<f64>> = Vec::new();
    let mut current = setup.clone();
    let mut trace: Option<ClosedLoopTrace> = None;
    let mut x = x0.clone();

    // step one at a time so the controller can be swapped between steps
    for k in 0..t_steps {
        let mut part = match run_closed_loop(&current, &x, 1, generator, seed) {
            Ok(p) => p,
            Err(SimError::InitialInfeasible(_)) if k > 0 => {
                trace.as_mut().expect("previous step recorded").fault_at = Some(k);
                break;
            }
            Err(e) => return Err(e),
        };
        let w = part.disturbances[0].clone();
        let x_next = part.states[1].clone();
        match &mut trace {
            None => trace = Some(part),
            Some(t) => {
                t.states.push(x_next.clone());
                t.inputs.append(&mut part.inputs);
                t.disturbances.append(&mut part.disturbances);
                t.statuses.append(&mut part.statuses);
                t.references.append(&mut part.references);
                t.x_s.append(&mut part.x_s);
                t.u_s.append(&mut part.u_s);
                t.objectives.append(&mut part.objectives);
                t.max_kkt = t.max_kkt.max(part.max_kkt);
                if part.fault_at.is_some() {
                    t.fault_at = Some(k);
                }
            }
        }
        if trace.as_ref().unwrap().fault_at.is_some() {
            break;
        }
        observed.push(w);
        x = x_next;

        if observed.len() >= n_h + n_samples - 1 {
            let windows: Vec<DVector<f64>> = (0..n_samples)
                .map(|i| {
                    let start = observed.len() - n_h - i;
                    let mut traj = DVector::zeros(n_w * n_h);
                    for s in 0..n_h {
                        traj.rows_mut(s * n_w, n_w).copy_from(&observed[start + s]);
                    }
                    traj
                })
                .filter(|t| cfg0.spec.support.contains(t, 1e-9))
                .collect();
            if windows.len() == n_samples {
                let mut cfg = current.segments[0].controller.cfg.clone();
                cfg.spec = crate::ambiguity::AmbiguitySpec::new(
                    windows,
                    cfg.spec.epsilon,
                    cfg.spec.alpha,
                    cfg.spec.support.clone(),
                )
                .map_err(|e| SimError::InvalidInput(e.to_string()))?;
                let controller =
                    Controller::new(cfg).map_err(SimError::Control)?;
                current.segments[0].controller = Arc::new(controller);
            }
        }
    }
    Ok(trace.expect("at least one step"))
}

/// Monte-Carlo batch: one independent generator per run (`base_seed + run`),
/// runs executed in parallel and returned in run order.
pub fn run_batch(
    setup: &ClosedLoopSetup,
    x0: &DVector<f64>,
    t_steps: usize,
    gen_spec: &GeneratorSpec,
    support: &Polytope,
    base_seed: u64,
    runs: usize,
) -> Result<Vec<ClosedLoopTrace>, SimError> {
    let results: Vec<Result<ClosedLoopTrace, SimError>> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let seed = base_seed.wrapping_add(r as u64);
            let mut generator =
                DisturbanceGenerator::new(gen_spec.clone(), support.clone(), seed)?;
            run_closed_loop(setup, x0, t_steps, &mut generator, seed)
        })
        .collect();
    results.into_iter().collect()
}

/// Affine per-state map between normalized and physical units.
#[derive(Debug, Clone, Serialize)]
pub struct ScalingMap {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ScalingMap {
    pub fn identity(n: usize) -> Self {
        ScalingMap { offset: vec![0.0; n], scale: vec![1.0; n] }
    }

    pub fn to_physical(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| self.offset[i] + self.scale[i] * x[i])
    }

    pub fn to_normalized(&self, x_phys: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x_phys.len(), |i, _| (x_phys[i] - self.offset[i]) / self.scale[i])
    }
}

/// Aggregate metrics over a batch of traces. Statistics on states are
/// reported in physical units through the scaling map; the stage cost and
/// its bound live in normalized (controller) coordinates.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub n_runs: usize,
    pub t_steps: usize,
    pub per_state_variance: Vec<f64>,
    pub per_run_variance: Vec<Vec<f64>>,
    pub violation_upper: Vec<f64>,
    pub violation_lower: Vec<f64>,
    pub mean_trajectory: Vec<Vec<f64>>,
    pub mean_abs_tracking_error: Vec<f64>,
    pub per_run_tracking_mse: Vec<f64>,
    pub avg_stage_cost: f64,
    pub stage_cost_bound: f64,
    pub bound_satisfied: bool,
    pub disturbance_covariance: Vec<Vec<f64>>,
    pub faults: usize,
    pub max_kkt: f64,
}

/// Strict-exceedance tolerance for violation counting.
const VIOLATION_TOL: f64 = 1e-9;
/// Leading steps dropped from the long-run stage-cost average.
const TRANSIENT_STEPS: usize = 10;

/// Pooled statistics over all runs and time points. Violations count strict
/// exceedances beyond the physical bounds; boundary contact is not a
/// violation. States enter the statistics after their step (indices
/// `1..=t`); the fixed initial state is excluded.
pub fn metrics_summary(
    traces: &[ClosedLoopTrace],
    bounds_lo_phys: &DVector<f64>,
    bounds_hi_phys: &DVector<f64>,
    tracked: &[usize],
    cost: &CostSpec,
    p_terminal: &DMatrix<f64>,
    sys: &LinearSystem,
    scaling: &ScalingMap,
) -> MetricsReport {
    assert!(!traces.is_empty(), "metrics need at least one trace");
    let n_x = traces[0].states[0].len();
    let t_steps = traces[0].inputs.len();

    let mut sum = vec![0.0; n_x];
    let mut count = 0usize;
    let mut upper = vec![0usize; n_x];
    let mut lower = vec![0usize; n_x];
    let mut mean_traj = vec![vec![0.0; n_x]; t_steps];
    let mut per_run_variance = Vec::with_capacity(traces.len());
    let mut faults = 0;
    let mut max_kkt: f64 = 0.0;

    for tr in traces {
        if tr.fault_at.is_some() {
            faults += 1;
        }
        max_kkt = max_kkt.max(tr.max_kkt);
        let steps = tr.inputs.len();
        let mut run_sum = vec![0.0; n_x];
        let mut run_sq = vec![0.0; n_x];
        for k in 1..=steps {
            let phys = scaling.to_physical(&tr.states[k]);
            for i in 0..n_x {
                sum[i] += phys[i];
                run_sum[i] += phys[i];
                run_sq[i] += phys[i] * phys[i];
                if phys[i] > bounds_hi_phys[i] + VIOLATION_TOL {
                    upper[i] += 1;
                }
                if phys[i] < bounds_lo_phys[i] - VIOLATION_TOL {
                    lower[i] += 1;
                }
                if k - 1 < t_steps {
                    mean_traj[k - 1][i] += phys[i] / traces.len() as f64;
                }
            }
            count += 1;
        }
        let rn = steps as f64;
        per_run_variance.push(
            (0..n_x)
                .map(|i| {
                    if steps > 1 {
                        (run_sq[i] - run_sum[i] * run_sum[i] / rn) / (rn - 1.0)
                    } else {
                        0.0
                    }
                })
                .collect(),
        );
    }
    let grand_mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut var_acc = vec![0.0; n_x];
    for tr in traces {
        for k in 1..=tr.inputs.len() {
            let phys = scaling.to_physical(&tr.states[k]);
            for i in 0..n_x {
                let d = phys[i] - grand_mean[i];
                var_acc[i] += d * d;
            }
        }
    }
    let per_state_variance: Vec<f64> =
        var_acc.iter().map(|v| if count > 1 { v / (count as f64 - 1.0) } else { 0.0 }).collect();

    // tracking error on the tracked outputs, physical units
    let mut abs_err = vec![0.0; tracked.len()];
    let mut err_count = 0usize;
    let mut per_run_tracking_mse = Vec::with_capacity(traces.len());
    for tr in traces {
        let mut run_mse = 0.0;
        for k in 0..tr.inputs.len() {
            let phys = scaling.to_physical(&tr.states[k + 1]);
            for (j, &idx) in tracked.iter().enumerate() {
                let ref_phys = scaling.offset[idx] + scaling.scale[idx] * tr.references[k][j];
                let e = phys[idx] - ref_phys;
                abs_err[j] += e.abs();
                run_mse += e * e;
            }
            err_count += 1;
        }
        per_run_tracking_mse
            .push(if tr.inputs.is_empty() { 0.0 } else { run_mse / tr.inputs.len() as f64 });
    }
    let mean_abs_tracking_error: Vec<f64> =
        abs_err.iter().map(|e| if err_count > 0 { e / err_count as f64 } else { 0.0 }).collect();

    // long-run average stage cost in shifted coordinates, transient dropped
    let mut cost_acc = 0.0;
    let mut cost_count = 0usize;
    for tr in traces {
        for k in TRANSIENT_STEPS..tr.inputs.len() {
            let xs = &tr.states[k] - &tr.x_s[k];
            let us = &tr.inputs[k] - &tr.u_s[k];
            cost_acc += (xs.transpose() * &cost.q * &xs)[0] + (us.transpose() * &cost.r * &us)[0];
            cost_count += 1;
        }
    }
    let avg_stage_cost = if cost_count > 0 { cost_acc / cost_count as f64 } else { 0.0 };

    // sample covariance of all recorded disturbances
    let n_w = sys.n_w();
    let mut w_mean = DVector::zeros(n_w);
    let mut w_count = 0usize;
    for tr in traces {
        for w in &tr.disturbances {
            w_mean += w;
            w_count += 1;
        }
    }
    if w_count > 0 {
        w_mean /= w_count as f64;
    }
    let mut sigma_w = DMatrix::zeros(n_w, n_w);
    for tr in traces {
        for w in &tr.disturbances {
            let d = w - &w_mean;
            sigma_w += &d * d.transpose();
        }
    }
    if w_count > 1 {
        sigma_w /= (w_count - 1) as f64;
    }
    let bound = (&sys.d * &sigma_w * sys.d.transpose() * p_terminal).trace();

    MetricsReport {
        n_runs: traces.len(),
        t_steps,
        per_state_variance,
        per_run_variance,
        violation_upper: upper.iter().map(|&c| c as f64 / count as f64).collect(),
        violation_lower: lower.iter().map(|&c| c as f64 / count as f64).collect(),
        mean_trajectory: mean_traj,
        mean_abs_tracking_error,
        per_run_tracking_mse,
        avg_stage_cost,
        stage_cost_bound: bound,
        bound_satisfied: avg_stage_cost <= bound * 1.10,
        disturbance_covariance: (0..n_w)
            .map(|i| (0..n_w).map(|j| sigma_w[(i, j)]).collect())
            .collect(),
        faults,
        max_kkt,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityCheck {
    pub avg_cost: f64,
    pub bound: f64,
    pub satisfied: bool,
}

/// Long-run average stage cost against `tr(D Sigma_w D' P)` with a 10 %
/// tolerance (regulation runs; the transient window is excluded inside
/// [`metrics_summary`]).
pub fn stability_bound_check(
    traces: &[ClosedLoopTrace],
    cost: &CostSpec,
    p_terminal: &DMatrix<f64>,
    sys: &LinearSystem,
) -> StabilityCheck {
    let n_x = sys.n_x();
    let report = metrics_summary(
        traces,
        &DVector::from_element(n_x, f64::NEG_INFINITY),
        &DVector::from_element(n_x, f64::INFINITY),
        &[],
        cost,
        p_terminal,
        sys,
        &ScalingMap::identity(n_x),
    );
    StabilityCheck {
        avg_cost: report.avg_stage_cost,
        bound: report.stage_cost_bound,
        satisfied: report.avg_stage_cost <= report.stage_cost_bound * 1.10,
    }
}

/// Two-sided Wilcoxon rank-sum test. Exact enumeration of all group
/// assignments when `n_a + n_b <= 12`, otherwise the normal approximation
/// with tie correction.
pub fn wilcoxon_rank_sum(group_a: &[f64], group_b: &[f64]) -> f64 {
    assert!(!group_a.is_empty() && !group_b.is_empty(), "both groups must be nonempty");
    let n_a = group_a.len();
    let n_b = group_b.len();
    let n = n_a + n_b;

    // midranks over the pooled sample
    let mut pooled: Vec<(f64, usize)> =
        group_a.iter().chain(group_b).copied().zip(0..).map(|(v, i)| (v, i)).collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for item in pooled.iter().take(j + 1).skip(i) {
            ranks[item.1] = mid;
        }
        i = j + 1;
    }
    let w_obs: f64 = ranks[..n_a].iter().sum();

    if n <= 12 {
        // exact: enumerate all C(n, n_a) assignments of ranks to group A
        let mut sorted = ranks.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mu = n_a as f64 * (n + 1) as f64 / 2.0;
        let dev = (w_obs - mu).abs();
        let mut extreme = 0usize;
        let mut total = 0usize;
        let mut idx: Vec<usize> = (0..n_a).collect();
        loop {
            let w: f64 = idx.iter().map(|&k| sorted[k]).sum();
            if (w - mu).abs() >= dev - 1e-12 {
                extreme += 1;
            }
            total += 1;
            // next combination
            let mut pos = n_a;
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                if idx[pos] != pos + n - n_a {
                    idx[pos] += 1;
                    for q in pos + 1..n_a {
                        idx[q] = idx[q - 1] + 1;
                    }
                    break;
                }
                if pos == 0 {
                    return extreme as f64 / total as f64;
                }
            }
            if idx[0] > n - n_a {
                break;
            }
        }
        extreme as f64 / total as f64
    } else {
        let mu = n_a as f64 * (n + 1) as f64 / 2.0;
        // tie correction over pooled values
        let mut tie_term = 0.0;
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && pooled[j + 1].0 == pooled[i].0 {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = (n_a * n_b) as f64 / 12.0
            * ((n + 1) as f64 - tie_term / (n as f64 * (n as f64 - 1.0)));
        if var <= 0.0 {
            return 1.0;
        }
        let z = (w_obs - mu) / var.sqrt();
        2.0 * normal_sf(z.abs())
    }
}

/// Upper tail of the standard normal distribution.
fn normal_sf(z: f64) -> f64 {
    0.5 * erfc_approx(z / std::f64::consts::SQRT_2)
}

/// Complementary error function (Abramowitz-Stegun 7.1.26 style rational
/// approximation, absolute error below 1.5e-7).
fn erfc_approx(x: f64) -> f64 {
    let sign_neg = x < 0.0;
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let val = poly * (-x * x).exp();
    if sign_neg {
        2.0 - val
    } else {
        val
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridPointOutcome {
    pub point: Vec<f64>,
    pub da_feasible: bool,
    pub tube_feasible: bool,
    pub da_objective: Option<f64>,
    pub tube_objective: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridReport {
    pub n_points: usize,
    pub da_count: usize,
    pub tube_count: usize,
    /// tube-feasible but full-policy-infeasible points (must be empty)
    pub inclusion_violations: usize,
    pub volume_ratio: f64,
    pub outcomes: Vec<GridPointOutcome>,
}

/// Cartesian grid over a box.
pub fn grid_points(lo: &[f64], hi: &[f64], counts: &[usize]) -> Vec<DVector<f64>> {
    assert_eq!(lo.len(), hi.len());
    assert_eq!(lo.len(), counts.len());
    let dim = lo.len();
    let mut points = vec![DVector::zeros(dim)];
    for d in 0..dim {
        let mut next = Vec::with_capacity(points.len() * counts[d]);
        for p in &points {
            for k in 0..counts[d] {
                let val = if counts[d] == 1 {
                    0.5 * (lo[d] + hi[d])
                } else {
                    lo[d] + (hi[d] - lo[d]) * k as f64 / (counts[d] - 1) as f64
                };
                let mut q = p.clone();
                q[d] = val;
                next.push(q);
            }
        }
        points = next;
    }
    points
}

/// Solve both controllers on every grid point and compare feasibility and
/// optimal objectives.
pub fn feasible_set_grid(
    da: &Controller,
    tube: &Controller,
    grid: &[DVector<f64>],
) -> Result<GridReport, SimError> {
    let outcomes: Vec<Result<GridPointOutcome, SimError>> = grid
        .par_iter()
        .map(|x| {
            let rd = da.step(x)?;
            let rt = tube.step(x)?;
            Ok(GridPointOutcome {
                point: x.iter().copied().collect(),
                da_feasible: rd.status == Status::Optimal,
                tube_feasible: rt.status == Status::Optimal,
                da_objective: (rd.status == Status::Optimal).then_some(rd.objective),
                tube_objective: (rt.status == Status::Optimal).then_some(rt.objective),
            })
        })
        .collect();
    let outcomes: Vec<GridPointOutcome> = outcomes.into_iter().collect::<Result<_, _>>()?;
    let da_count = outcomes.iter().filter(|o| o.da_feasible).count();
    let tube_count = outcomes.iter().filter(|o| o.tube_feasible).count();
    let inclusion_violations =
        outcomes.iter().filter(|o| o.tube_feasible && !o.da_feasible).count();
    Ok(GridReport {
        n_points: outcomes.len(),
        da_count,
        tube_count,
        inclusion_violations,
        volume_ratio: if tube_count > 0 { da_count as f64 / tube_count as f64 } else { f64::NAN },
        outcomes,
    })
}

/// Write a trace as CSV: `time, x.., u.., w.., status, ref..` for steps
/// `0..t-1` (the terminal state is reconstructable through replay).
pub fn write_trace_csv(trace: &ClosedLoopTrace, path: &str) -> Result<(), SimError> {
    let mut out = String::new();
    let n_x = trace.states[0].len();
    let n_u = trace.inputs.first().map_or(0, |u| u.len());
    let n_w = trace.disturbances.first().map_or(0, |w| w.len());
    let n_r = trace.references.first().map_or(0, |r| r.len());
    out.push_str("time");
    for i in 1..=n_x {
        out.push_str(&format!(",x_{}", i));
    }
    for i in 1..=n_u {
        out.push_str(&format!(",u_{}", i));
    }
    for i in 1..=n_w {
        out.push_str(&format!(",w_{}", i));
    }
    out.push_str(",status");
    for i in 1..=n_r {
        out.push_str(&format!(",ref_{}", i));
    }
    out.push('\n');
    for k in 0..trace.inputs.len() {
        out.push_str(&k.to_string());
        for v in trace.states[k].iter() {
            out.push_str(&format!(",{}", v));
        }
        for v in trace.inputs[k].iter() {
            out.push_str(&format!(",{}", v));
        }
        for v in trace.disturbances[k].iter() {
            out.push_str(&format!(",{}", v));
        }
        out.push_str(&format!(",{:?}", trace.statuses[k]));
        for v in trace.references[k].iter() {
            out.push_str(&format!(",{}", v));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| SimError::Io { path: path.into(), err: e.to_string() })
}

/// Re-read an exported trace.
pub struct ParsedTrace {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub disturbances: Vec<DVector<f64>>,
}

pub fn read_trace_csv(
    path: &str,
    n_x: usize,
    n_u: usize,
    n_w: usize,
) -> Result<ParsedTrace, SimError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SimError::Io { path: path.into(), err: e.to_string() })?;
    let mut parsed = ParsedTrace { states: Vec::new(), inputs: Vec::new(), disturbances: Vec::new() };
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() < 1 + n_x + n_u + n_w {
            return Err(SimError::Io { path: path.into(), err: "short row".into() });
        }
        let nums = |from: usize, len: usize| -> Result<DVector<f64>, SimError> {
            let vals: Result<Vec<f64>, _> =
                cells[from..from + len].iter().map(|c| c.parse::<f64>()).collect();
            vals.map(DVector::from_vec)
                .map_err(|e| SimError::Io { path: path.into(), err: e.to_string() })
        };
        parsed.states.push(nums(1, n_x)?);
        parsed.inputs.push(nums(1 + n_x, n_u)?);
        parsed.disturbances.push(nums(1 + n_x + n_u, n_w)?);
    }
    Ok(parsed)
}

/// Largest defect of the plant recursion over consecutive exported rows;
/// exactly zero when the file was produced by [`write_trace_csv`] (shortest
/// round-trip float formatting).
pub fn replay_residual(sys: &LinearSystem, parsed: &ParsedTrace) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..parsed.states.len().saturating_sub(1) {
        let pred = sys.step(&parsed.states[k], &parsed.inputs[k], &parsed.disturbances[k]);
        worst = worst.max((&pred - &parsed.states[k + 1]).amax());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn generator_deterministic_for_fixed_seed() {
        let support = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
        let mut g1 =
            DisturbanceGenerator::new(GeneratorSpec::UniformSupport, support.clone(), 7).unwrap();
        let mut g2 = DisturbanceGenerator::new(GeneratorSpec::UniformSupport, support, 7).unwrap();
        for _ in 0..100 {
            assert_eq!(g1.next().unwrap(), g2.next().unwrap());
        }
    }

    #[test]
    fn generator_tiny_sigma_concentrates_at_mean() {
        let support = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let spec = GeneratorSpec::TruncatedGaussian {
            mean: dvector![0.2, -0.3],
            std: dvector![1e-8, 1e-8],
        };
        let mut g = DisturbanceGenerator::new(spec, support, 3).unwrap();
        for _ in 0..50 {
            let w = g.next().unwrap();
            assert!((w[0] - 0.2).abs() < 1e-6 && (w[1] + 0.3).abs() < 1e-6);
        }
    }

    #[test]
    fn generator_uniform_mean_near_zero() {
        let support = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let mut g = DisturbanceGenerator::new(GeneratorSpec::UniformSupport, support, 11).unwrap();
        let n = 100_000;
        let mut mean = dvector![0.0, 0.0];
        for _ in 0..n {
            mean += g.next().unwrap();
        }
        mean /= n as f64;
        assert!(mean[0].abs() < 0.02 && mean[1].abs() < 0.02, "mean {:?}", mean);
    }

    #[test]
    fn generator_rejects_hopeless_acceptance() {
        // support far away from the gaussian mass
        let support = Polytope::from_box(&[10.0], &[11.0]).unwrap();
        let spec = GeneratorSpec::TruncatedGaussian { mean: dvector![0.0], std: dvector![0.01] };
        let mut g = DisturbanceGenerator::new(spec, support, 1).unwrap();
        assert!(matches!(g.next(), Err(SimError::GeneratorAcceptance)));
    }

    #[test]
    fn wilcoxon_identical_groups_is_one() {
        let a = [1.0, 2.0, 3.0];
        let p = wilcoxon_rank_sum(&a, &a);
        assert!((p - 1.0).abs() < 1e-12, "p = {}", p);
    }

    #[test]
    fn wilcoxon_small_exact_enumeration() {
        let p = wilcoxon_rank_sum(&[1.0, 2.0], &[3.0, 4.0]);
        assert!((p - 2.0 / 6.0).abs() < 1e-12, "p = {}", p);
    }

    #[test]
    fn wilcoxon_detects_unit_shift() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let a: Vec<f64> = (0..60).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..60).map(|_| rng.sample::<f64, _>(StandardNormal) + 1.0).collect();
        let p = wilcoxon_rank_sum(&a, &b);
        assert!(p < 0.01, "p = {}", p);
    }

    #[test]
    fn metrics_constant_trace_zero_variance() {
        let sys =
            LinearSystem::new(dmatrix![1.0], dmatrix![1.0], dmatrix![1.0]).unwrap();
        let cost = CostSpec::new(dmatrix![1.0], dmatrix![1.0]).unwrap();
        let trace = ClosedLoopTrace {
            states: vec![dvector![0.0]; 21],
            inputs: vec![dvector![0.0]; 20],
            disturbances: vec![dvector![0.0]; 20],
            statuses: vec![Status::Optimal; 20],
            references: vec![dvector![0.0]; 20],
            x_s: vec![dvector![0.0]; 20],
            u_s: vec![dvector![0.0]; 20],
            objectives: vec![0.0; 20],
            candidate_violations: vec![],
            max_kkt: 0.0,
            seed: 0,
            fault_at: None,
        };
        let r = metrics_summary(
            &[trace],
            &dvector![-1.0],
            &dvector![1.0],
            &[0],
            &cost,
            &dmatrix![1.0],
            &sys,
            &ScalingMap::identity(1),
        );
        assert_eq!(r.per_state_variance[0], 0.0);
        assert_eq!(r.violation_upper[0], 0.0);
        assert_eq!(r.violation_lower[0], 0.0);
    }

    #[test]
    fn metrics_boundary_contact_is_not_violation() {
        let sys = LinearSystem::new(dmatrix![1.0], dmatrix![1.0], dmatrix![1.0]).unwrap();
        let cost = CostSpec::new(dmatrix![1.0], dmatrix![1.0]).unwrap();
        let trace = ClosedLoopTrace {
            states: vec![dvector![0.0], dvector![4.0], dvector![11.0]],
            inputs: vec![dvector![0.0]; 2],
            disturbances: vec![dvector![0.0]; 2],
            statuses: vec![Status::Optimal; 2],
            references: vec![dvector![0.0]; 2],
            x_s: vec![dvector![0.0]; 2],
            u_s: vec![dvector![0.0]; 2],
            objectives: vec![0.0; 2],
            candidate_violations: vec![],
            max_kkt: 0.0,
            seed: 0,
            fault_at: None,
        };
        let r = metrics_summary(
            &[trace],
            &dvector![4.0],
            &dvector![11.0],
            &[],
            &cost,
            &dmatrix![1.0],
            &sys,
            &ScalingMap::identity(1),
        );
        assert_eq!(r.violation_upper[0], 0.0);
        assert_eq!(r.violation_lower[0], 0.0);
    }

    #[test]
    fn metrics_counts_known_exceedances() {
        let sys = LinearSystem::new(dmatrix![1.0], dmatrix![1.0], dmatrix![1.0]).unwrap();
        let cost = CostSpec::new(dmatrix![1.0], dmatrix![1.0]).unwrap();
        let t = 100;
        let mut states = vec![dvector![0.0]];
        for k in 0..t {
            states.push(if k % 14 == 0 && k / 14 < 7 { dvector![2.0] } else { dvector![0.0] });
        }
        let trace = ClosedLoopTrace {
            states,
            inputs: vec![dvector![0.0]; t],
            disturbances: vec![dvector![0.0]; t],
            statuses: vec![Status::Optimal; t],
            references: vec![dvector![0.0]; t],
            x_s: vec![dvector![0.0]; t],
            u_s: vec![dvector![0.0]; t],
            objectives: vec![0.0; t],
            candidate_violations: vec![],
            max_kkt: 0.0,
            seed: 0,
            fault_at: None,
        };
        let r = metrics_summary(
            &[trace],
            &dvector![-1.0],
            &dvector![1.0],
            &[],
            &cost,
            &dmatrix![1.0],
            &sys,
            &ScalingMap::identity(1),
        );
        assert!((r.violation_upper[0] - 0.07).abs() < 1e-12, "{}", r.violation_upper[0]);
    }

    #[test]
    fn grid_points_cartesian_product() {
        let pts = grid_points(&[0.0, -1.0], &[1.0, 1.0], &[2, 3]);
        assert_eq!(pts.len(), 6);
        assert!(pts.iter().any(|p| p[0] == 0.0 && p[1] == 0.0));
        assert!(pts.iter().any(|p| p[0] == 1.0 && p[1] == 1.0));
    }
}
