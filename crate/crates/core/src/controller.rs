//! Per-step assembly and solving of the control problem, the tube baseline
//! (feedback vector pinned to the fixed-gain image) and the candidate-shift
//! construction used for warm starts and feasibility certification.

use crate::ambiguity::{AmbiguityError, AmbiguitySpec};
use crate::lin_sys::{
    self, build_prediction_matrices, AffinePolicy, CostSpec, LinSysError, LinearSystem,
    PredictionMatrices, TerminalIngredients,
};
use crate::polytope::{power_support, support_value, Polytope, PolytopeError};
use crate::reformulation::{
    self, assemble, assemble_objective, build_chance_rows, dr_cvar_block, feasibility_violation,
    robust_input_block, robust_terminal_block, t_step_block, Assembled, ChanceRow, ReformError,
};
use crate::solver::{self, KktResiduals, SolverError, SolverSettings, Status};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("controller fault: solver returned {0:?}")]
    Fault(Status),
    #[error(transparent)]
    LinSys(#[from] LinSysError),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error(transparent)]
    Reform(#[from] ReformError),
    #[error(transparent)]
    Ambiguity(#[from] AmbiguityError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerMode {
    DaDr,
    Tube,
}

/// Everything a controller instance needs, in shifted (origin-centered)
/// coordinates: plant, weights, ambiguity, constraint sets and terminal
/// ingredients.
#[derive(Debug, Clone)]
pub struct MpcConfig {
    pub sys: LinearSystem,
    pub cost: CostSpec,
    pub spec: AmbiguitySpec,
    /// single-step disturbance support (the ambiguity support is its power)
    pub w_single: Polytope,
    pub n_h: usize,
    pub terminal: TerminalIngredients,
    pub mode: ControllerMode,
    pub recursive_feasibility: bool,
    pub state_con: Polytope,
    pub input_con: Polytope,
    pub settings: SolverSettings,
}

impl MpcConfig {
    pub fn n_c(&self) -> usize {
        self.sys.n_u() * self.n_h
    }

    pub fn n_v(&self) -> usize {
        lin_sys::policy_dim(self.n_h, self.sys.n_u(), self.sys.n_w())
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        if self.n_h < 1 {
            return Err(ControlError::InvalidConfig("horizon must be at least 1".into()));
        }
        if self.spec.dim() != self.sys.n_w() * self.n_h {
            return Err(ControlError::InvalidConfig(
                "ambiguity support must cover the stacked disturbance space".into(),
            ));
        }
        if self.state_con.dim() != self.sys.n_x() || self.input_con.dim() != self.sys.n_u() {
            return Err(ControlError::InvalidConfig("constraint dimensions mismatch".into()));
        }
        if self.terminal.x_f.n_rows() == 0 {
            return Err(ControlError::InvalidConfig("terminal set has no rows".into()));
        }
        Ok(())
    }

    /// Check the terminal ingredients: Lyapunov residual of `P` and the
    /// invariance/membership conditions of the terminal set, row by row via
    /// support LPs.
    pub fn verify_terminal(&self) -> Result<(), ControlError> {
        let a_cl = &self.sys.a + &self.sys.b * &self.terminal.k_f;
        let q_tilde =
            &self.cost.q + self.terminal.k_f.transpose() * &self.cost.r * &self.terminal.k_f;
        let res = (a_cl.transpose() * &self.terminal.p * &a_cl - &self.terminal.p + q_tilde).norm();
        if res > 1e-9 {
            return Err(ControlError::InvalidConfig(format!(
                "terminal cost fails its Lyapunov equation (residual {:.2e})",
                res
            )));
        }
        let xf = &self.terminal.x_f;
        for i in 0..xf.n_rows() {
            let row = xf.m.row(i).transpose();
            let s_own = support_value(xf, &(a_cl.transpose() * &row))?;
            let s_w = support_value(&self.w_single, &(self.sys.d.transpose() * &row))?;
            if s_own + s_w > xf.b[i] + 1e-8 {
                return Err(ControlError::InvalidConfig(format!(
                    "terminal set is not robustly invariant at row {}",
                    i
                )));
            }
        }
        for i in 0..self.state_con.n_rows() {
            let dir = self.state_con.m.row(i).transpose();
            if support_value(xf, &dir)? > self.state_con.b[i] + 1e-8 {
                return Err(ControlError::InvalidConfig(
                    "terminal set leaves the state constraints".into(),
                ));
            }
        }
        for i in 0..self.input_con.n_rows() {
            let dir = (self.input_con.m.row(i) * &self.terminal.k_f).transpose();
            if support_value(xf, &dir)? > self.input_con.b[i] + 1e-8 {
                return Err(ControlError::InvalidConfig(
                    "terminal gain leaves the input constraints on the terminal set".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub u0: DVector<f64>,
    pub policy: AffinePolicy,
    pub status: Status,
    pub objective: f64,
    pub kkt: KktResiduals,
    pub solve_time: std::time::Duration,
}

/// Disturbance-feedback image of the fixed error feedback `u_e = K_f e`:
/// gain blocks `K_f (A + B K_f)^(j-i-1) D` below the diagonal.
pub fn tube_policy_vector(
    sys: &LinearSystem,
    k_f: &DMatrix<f64>,
    n_h: usize,
) -> Result<DVector<f64>, ControlError> {
    let a_cl = &sys.a + &sys.b * k_f;
    if crate::polytope::spectral_radius(&a_cl) >= 1.0 {
        return Err(ControlError::InvalidConfig("tube gain does not stabilize the plant".into()));
    }
    let (n_u, n_w) = (sys.n_u(), sys.n_w());
    let mut k = DMatrix::zeros(n_u * n_h, n_w * n_h);
    let mut cl_pow = vec![DMatrix::identity(sys.n_x(), sys.n_x())];
    for p in 0..n_h {
        let next = &a_cl * &cl_pow[p];
        cl_pow.push(next);
    }
    for j in 1..n_h {
        for i in 0..j {
            let block = k_f * &cl_pow[j - i - 1] * &sys.d;
            k.view_mut((j * n_u, i * n_w), (n_u, n_w)).copy_from(&block);
        }
    }
    Ok(lin_sys::vectorize_policy(&k, n_h, n_u, n_w)?)
}

/// Time-shifted candidate policy: previous optimal blocks moved up-left, the
/// freed last block-row filled with open-loop terminal feedback
/// `K_f A^(N_h-2-i) D`, and the feedforward updated with the realized
/// disturbance plus terminal feedback on the nominal end state.
pub fn candidate_shift(
    prev: &AffinePolicy,
    w_applied: &DVector<f64>,
    cfg: &MpcConfig,
    x_prev: &DVector<f64>,
) -> Result<AffinePolicy, ControlError> {
    let (n_h, n_u, n_w, n_x) = (cfg.n_h, cfg.sys.n_u(), cfg.sys.n_w(), cfg.sys.n_x());
    if prev.n_h != n_h || prev.n_u != n_u || prev.n_w != n_w {
        return Err(ControlError::InvalidConfig("policy dimensions mismatch".into()));
    }
    if w_applied.len() != n_w || x_prev.len() != n_x {
        return Err(ControlError::InvalidConfig("state/disturbance dimensions mismatch".into()));
    }
    let k_f = &cfg.terminal.k_f;
    let mut a_pow = vec![DMatrix::identity(n_x, n_x)];
    for p in 0..n_h {
        let next = &cfg.sys.a * &a_pow[p];
        a_pow.push(next);
    }

    let mut k = DMatrix::zeros(n_u * n_h, n_w * n_h);
    for j in 1..n_h.saturating_sub(1) {
        for i in 0..j {
            let block = prev.k.view(((j + 1) * n_u, (i + 1) * n_w), (n_u, n_w));
            k.view_mut((j * n_u, i * n_w), (n_u, n_w)).copy_from(&block);
        }
    }
    if n_h >= 2 {
        let last = n_h - 1;
        for i in 0..n_h - 1 {
            let block = k_f * &a_pow[n_h - 2 - i] * &cfg.sys.d;
            k.view_mut((last * n_u, i * n_w), (n_u, n_w)).copy_from(&block);
        }
    }

    let mut c = DVector::zeros(n_u * n_h);
    for i in 0..n_h - 1 {
        let shifted = prev.c.rows((i + 1) * n_u, n_u)
            + prev.k.view(((i + 1) * n_u, 0), (n_u, n_w)) * w_applied;
        c.rows_mut(i * n_u, n_u).copy_from(&shifted);
    }
    // nominal end state of the previous plan under the realized disturbance
    let mut x_bar = &a_pow[n_h] * x_prev + &a_pow[n_h - 1] * &cfg.sys.d * w_applied;
    for i in 0..n_h {
        x_bar += &a_pow[n_h - 1 - i] * &cfg.sys.b * prev.c.rows(i * n_u, n_u);
    }
    c.rows_mut((n_h - 1) * n_u, n_u).copy_from(&(k_f * x_bar));
    Ok(AffinePolicy::new(k, c, n_h, n_u, n_w)?)
}

fn build_blocks(
    cfg: &MpcConfig,
    pred: &PredictionMatrices,
    chance_rows: &[ChanceRow],
    x_k: &DVector<f64>,
) -> Result<Vec<reformulation::ConstraintBlock>, ControlError> {
    let w_power = power_support(&cfg.w_single, cfg.n_h);
    let mut blocks = Vec::new();
    blocks.push(dr_cvar_block(x_k, chance_rows, &cfg.spec)?);
    blocks.push(robust_input_block(pred, &cfg.input_con, &w_power)?);
    blocks.push(robust_terminal_block(x_k, pred, &cfg.terminal.x_f, &w_power)?);
    if cfg.recursive_feasibility {
        for t in 1..cfg.n_h {
            blocks.push(t_step_block(
                t,
                x_k,
                pred,
                chance_rows,
                &cfg.spec,
                &cfg.w_single,
                &cfg.terminal.x_f,
            )?);
        }
    }
    Ok(blocks)
}

fn pin_tube_rows(assembled: &mut Assembled, v_tube: &DVector<f64>) {
    let p = &mut assembled.problem;
    let start = p.a_eq.nrows;
    p.a_eq.nrows += assembled.n_v;
    for k in 0..assembled.n_v {
        p.a_eq.push(start + k, assembled.n_c + k, 1.0);
        p.b_eq.push(v_tube[k]);
    }
}

/// Build the complete per-step problem at `x_k` (blocks, objective and, in
/// tube mode, the rows pinning the feedback vector).
pub fn build_problem(cfg: &MpcConfig, x_k: &DVector<f64>) -> Result<Assembled, ControlError> {
    cfg.validate()?;
    let pred = build_prediction_matrices(&cfg.sys, cfg.n_h)?;
    let chance_rows = build_chance_rows(&cfg.state_con, &pred);
    let blocks = build_blocks(cfg, &pred, &chance_rows, x_k)?;
    let objective =
        assemble_objective(x_k, &pred, &cfg.cost, &cfg.terminal.p, &cfg.spec.samples)?;
    let mut assembled = assemble(cfg.n_c(), cfg.n_v(), &blocks, Some(&objective));
    if cfg.mode == ControllerMode::Tube {
        let v_tube = tube_policy_vector(&cfg.sys, &cfg.terminal.k_f, cfg.n_h)?;
        pin_tube_rows(&mut assembled, &v_tube);
    }
    Ok(assembled)
}

fn result_from_solution(
    cfg: &MpcConfig,
    sol: solver::Solution,
    elapsed: std::time::Duration,
) -> Result<StepResult, ControlError> {
    let n_c = cfg.n_c();
    let n_v = cfg.n_v();
    let c = DVector::from_column_slice(&sol.z[..n_c]);
    let v = DVector::from_column_slice(&sol.z[n_c..n_c + n_v]);
    let policy =
        AffinePolicy::from_vector(&v, c, cfg.n_h, cfg.sys.n_u(), cfg.sys.n_w())?;
    // the first block-row of the gain is structurally zero, so the applied
    // input is the first feedforward block and never depends on disturbances
    let u0 = policy.c.rows(0, cfg.sys.n_u()).into_owned();
    Ok(StepResult {
        u0,
        policy,
        status: sol.status,
        objective: sol.objective,
        kkt: sol.kkt,
        solve_time: elapsed,
    })
}

/// One-shot solve at `x_k`. The warm-start argument participates in the
/// controller's candidate bookkeeping; the interior-point backend does not
/// consume initial iterates, so it is not forwarded.
pub fn solve_step(
    cfg: &MpcConfig,
    x_k: &DVector<f64>,
    _warm: Option<&AffinePolicy>,
) -> Result<StepResult, ControlError> {
    let started = std::time::Instant::now();
    let assembled = build_problem(cfg, x_k)?;
    let sol = solver::solve_qp(&assembled.problem, &cfg.settings)?;
    result_from_solution(cfg, sol, started.elapsed())
}

/// A controller instance: caches the constraint structure (which depends on
/// `x_k` only through inequality right-hand sides) so closed-loop stepping
/// rebuilds vectors, not matrices.
pub struct Controller {
    pub cfg: MpcConfig,
    pred: PredictionMatrices,
    chance_rows: Vec<ChanceRow>,
    base: Assembled,
    /// columns of the linear map x_k -> b_ineq shift
    b_sensitivity: DMatrix<f64>,
    b_zero: Vec<f64>,
    /// candidate policy shifted from the previous optimum
    pub warm: Option<AffinePolicy>,
}

impl Controller {
    pub fn new(cfg: MpcConfig) -> Result<Self, ControlError> {
        cfg.validate()?;
        cfg.verify_terminal()?;
        let pred = build_prediction_matrices(&cfg.sys, cfg.n_h)?;
        let chance_rows = build_chance_rows(&cfg.state_con, &pred);
        let n_x = cfg.sys.n_x();
        let zero = DVector::zeros(n_x);
        let blocks = build_blocks(&cfg, &pred, &chance_rows, &zero)?;
        let objective =
            assemble_objective(&zero, &pred, &cfg.cost, &cfg.terminal.p, &cfg.spec.samples)?;
        let mut base = assemble(cfg.n_c(), cfg.n_v(), &blocks, Some(&objective));
        if cfg.mode == ControllerMode::Tube {
            let v_tube = tube_policy_vector(&cfg.sys, &cfg.terminal.k_f, cfg.n_h)?;
            pin_tube_rows(&mut base, &v_tube);
        }
        let b_zero = base.problem.b_ineq.clone();
        let mut b_sensitivity = DMatrix::zeros(b_zero.len(), n_x);
        for j in 0..n_x {
            let mut e = DVector::zeros(n_x);
            e[j] = 1.0;
            let blocks_j = build_blocks(&cfg, &pred, &chance_rows, &e)?;
            let asm = assemble(cfg.n_c(), cfg.n_v(), &blocks_j, None);
            for i in 0..b_zero.len() {
                b_sensitivity[(i, j)] = asm.problem.b_ineq[i] - b_zero[i];
            }
        }
        Ok(Controller { cfg, pred, chance_rows, base, b_sensitivity, b_zero, warm: None })
    }

    pub fn prediction(&self) -> &PredictionMatrices {
        &self.pred
    }

    pub fn chance_rows(&self) -> &[ChanceRow] {
        &self.chance_rows
    }

    /// Instantiate the cached structure at `x_k`.
    pub fn problem_at(&self, x_k: &DVector<f64>) -> Result<Assembled, ControlError> {
        let mut assembled = self.base.clone();
        let shift = &self.b_sensitivity * x_k;
        for i in 0..assembled.problem.b_ineq.len() {
            assembled.problem.b_ineq[i] = self.b_zero[i] + shift[i];
        }
        let obj = assemble_objective(
            x_k,
            &self.pred,
            &self.cfg.cost,
            &self.cfg.terminal.p,
            &self.cfg.spec.samples,
        )?;
        let n_z = self.cfg.n_c() + self.cfg.n_v();
        for k in 0..n_z {
            assembled.problem.fq[k] = obj.fq[k];
        }
        assembled.problem.obj_const = obj.constant;
        Ok(assembled)
    }

    /// Solve at `x_k` and update the candidate bookkeeping.
    pub fn step(&self, x_k: &DVector<f64>) -> Result<StepResult, ControlError> {
        let started = std::time::Instant::now();
        let assembled = self.problem_at(x_k)?;
        let sol = solver::solve_qp(&assembled.problem, &self.cfg.settings)?;
        result_from_solution(&self.cfg, sol, started.elapsed())
    }

    /// Worst constraint violation of a pinned policy at `x_k` (negative
    /// margin if strictly feasible). The slack LP only needs ~1e-7 accuracy,
    /// so it runs at a looser tolerance than the control solves.
    pub fn violation_of(
        &self,
        x_k: &DVector<f64>,
        policy: &AffinePolicy,
    ) -> Result<f64, ControlError> {
        let assembled = self.problem_at(x_k)?;
        let settings = SolverSettings { tol_feas: 1e-7, tol_gap: 1e-7, ..self.cfg.settings };
        Ok(feasibility_violation(&assembled, &policy.c, &policy.v(), &settings)?)
    }

    /// Advance the candidate after applying `prev` at `x_prev` and observing
    /// `w`.
    pub fn advance_candidate(
        &mut self,
        prev: &AffinePolicy,
        w: &DVector<f64>,
        x_prev: &DVector<f64>,
    ) -> Result<(), ControlError> {
        self.warm = Some(candidate_shift(prev, w, &self.cfg, x_prev)?);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lin_sys::{solve_dare, solve_lyapunov};
    use crate::polytope::max_rpi_set;
    use nalgebra::{dmatrix, dvector};

    fn scalar_cfg(mode: ControllerMode, rf: bool) -> MpcConfig {
        let sys = LinearSystem::new(dmatrix![0.9], dmatrix![1.0], dmatrix![1.0]).unwrap();
        let cost = CostSpec::new(dmatrix![1.0], dmatrix![0.5]).unwrap();
        let dare = solve_dare(&sys, &cost).unwrap();
        let a_cl = &sys.a + &sys.b * &dare.k_f;
        let q_tilde = &cost.q + dare.k_f.transpose() * &cost.r * &dare.k_f;
        let p = solve_lyapunov(&a_cl, &q_tilde).unwrap();
        let w_single = Polytope::from_box(&[-0.1], &[0.1]).unwrap();
        let state_con = Polytope::from_box(&[-1.0], &[1.0]).unwrap();
        let input_con = Polytope::from_box(&[-0.6], &[0.6]).unwrap();
        let x_f =
            max_rpi_set(&a_cl, &sys.d, &w_single, &state_con, &input_con, &dare.k_f).unwrap();
        let n_h = 3;
        let support = power_support(&w_single, n_h);
        let samples = vec![
            dvector![0.05, -0.02, 0.0],
            dvector![-0.08, 0.03, 0.06],
            dvector![0.01, 0.09, -0.04],
            dvector![0.0, 0.0, 0.0],
        ];
        let spec = AmbiguitySpec::new(samples, 0.02, 0.2, support).unwrap();
        MpcConfig {
            sys,
            cost,
            spec,
            w_single,
            n_h,
            terminal: TerminalIngredients { k_f: dare.k_f, p, x_f },
            mode,
            recursive_feasibility: rf,
            state_con,
            input_con,
            settings: SolverSettings::default(),
        }
    }

    #[test]
    fn tube_vector_zero_gain() {
        let sys = LinearSystem::new(dmatrix![0.5], dmatrix![1.0], dmatrix![1.0]).unwrap();
        let v = tube_policy_vector(&sys, &dmatrix![0.0], 3).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tube_vector_two_step_single_block() {
        let sys = LinearSystem::new(dmatrix![0.5], dmatrix![1.0], dmatrix![1.0]).unwrap();
        let kf = dmatrix![-0.4];
        let v = tube_policy_vector(&sys, &kf, 2).unwrap();
        assert_eq!(v.len(), 1);
        assert!((v[0] + 0.4).abs() < 1e-12);
    }

    #[test]
    fn tube_vector_scalar_three_step_blocks() {
        // a = 0.5, b = 1, d = 1, k_f = -0.4: blocks -0.4 at (0,1) and (1,2),
        // k_f (a + b k_f) d = -0.04 at (0,2).
        let sys = LinearSystem::new(dmatrix![0.5], dmatrix![1.0], dmatrix![1.0]).unwrap();
        let kf = dmatrix![-0.4];
        let v = tube_policy_vector(&sys, &kf, 3).unwrap();
        let k = lin_sys::devectorize_policy(&v, 3, 1, 1).unwrap();
        assert!((k[(1, 0)] + 0.4).abs() < 1e-12);
        assert!((k[(2, 1)] + 0.4).abs() < 1e-12);
        assert!((k[(2, 0)] + 0.04).abs() < 1e-12);
    }

    #[test]
    fn candidate_pure_shift_with_zero_gains() {
        let cfg = scalar_cfg(ControllerMode::DaDr, false);
        let mut cfg = cfg;
        cfg.terminal.k_f = dmatrix![0.0];
        // K* = 0, K_f = 0, w = 0: candidate feedforward is the shift of c*
        // with a trailing zero
        let prev = AffinePolicy::new(
            DMatrix::zeros(3, 3),
            dvector![0.3, -0.2, 0.1],
            3,
            1,
            1,
        )
        .unwrap();
        let cand = candidate_shift(&prev, &dvector![0.0], &cfg, &dvector![0.5]).unwrap();
        assert!((cand.c[0] + 0.2).abs() < 1e-12);
        assert!((cand.c[1] - 0.1).abs() < 1e-12);
        assert!(cand.c[2].abs() < 1e-12);
        assert!(cand.k.amax() == 0.0);
    }

    #[test]
    fn candidate_two_step_scalar_formulas() {
        let sys = LinearSystem::new(dmatrix![0.9], dmatrix![1.0], dmatrix![1.0]).unwrap();
        let mut cfg = scalar_cfg(ControllerMode::DaDr, false);
        cfg.sys = sys;
        cfg.n_h = 2;
        let support = power_support(&cfg.w_single, 2);
        cfg.spec = AmbiguitySpec::new(vec![dvector![0.0, 0.0]], 0.02, 0.2, support).unwrap();
        let kf = cfg.terminal.k_f[(0, 0)];
        let (a, b, d) = (0.9, 1.0, 1.0);
        let mut kmat = DMatrix::zeros(2, 2);
        kmat[(1, 0)] = 0.7; // K*_{0,1}
        let prev = AffinePolicy::new(kmat, dvector![0.25, -0.15], 2, 1, 1).unwrap();
        let (x, w) = (0.4, 0.08);
        let cand = candidate_shift(&prev, &dvector![w], &cfg, &dvector![x]).unwrap();
        // c~ = [c*_1 + K*_{0,1} w, K_f(a^2 x + a d w + a b c*_0 + b c*_1)]
        assert!((cand.c[0] - (-0.15 + 0.7 * w)).abs() < 1e-12);
        let x_bar = a * a * x + a * d * w + a * b * 0.25 + b * (-0.15);
        assert!((cand.c[1] - kf * x_bar).abs() < 1e-12);
        // single gain block K_f D at (0, 1)
        assert!((cand.k[(1, 0)] - kf * d).abs() < 1e-12);
    }

    #[test]
    fn nominal_degenerate_problem_recovers_lqr_gain() {
        // rf off, zero radius, single zero sample, W = {0}: the problem is a
        // nominal constrained LQR; deep inside the constraints the optimizer
        // reproduces the infinite-horizon gain because the terminal cost is
        // the Riccati solution.
        let mut cfg = scalar_cfg(ControllerMode::DaDr, false);
        cfg.w_single = Polytope::singleton_origin(1);
        let support = power_support(&cfg.w_single, cfg.n_h);
        cfg.spec = AmbiguitySpec::new(vec![DVector::zeros(3)], 0.0, 0.2, support).unwrap();
        let kf = cfg.terminal.k_f[(0, 0)];
        let x = dvector![0.2];
        let res = solve_step(&cfg, &x, None).unwrap();
        assert_eq!(res.status, Status::Optimal);
        assert!(
            (res.u0[0] - kf * x[0]).abs() < 1e-6,
            "u0 {} vs LQR {}",
            res.u0[0],
            kf * x[0]
        );
    }

    #[test]
    fn tube_mode_pins_feedback_vector() {
        let cfg = scalar_cfg(ControllerMode::Tube, false);
        let v_tube = tube_policy_vector(&cfg.sys, &cfg.terminal.k_f, cfg.n_h).unwrap();
        let res = solve_step(&cfg, &dvector![0.3], None).unwrap();
        assert_eq!(res.status, Status::Optimal);
        let v = res.policy.v();
        for k in 0..v.len() {
            assert!((v[k] - v_tube[k]).abs() < 1e-7, "v[{}] = {} vs {}", k, v[k], v_tube[k]);
        }
    }

    #[test]
    fn dadr_objective_dominates_tube() {
        let cfg_da = scalar_cfg(ControllerMode::DaDr, false);
        let cfg_tube = scalar_cfg(ControllerMode::Tube, false);
        for x in [-0.6, -0.2, 0.0, 0.35, 0.7] {
            let rd = solve_step(&cfg_da, &dvector![x], None).unwrap();
            let rt = solve_step(&cfg_tube, &dvector![x], None).unwrap();
            if rt.status == Status::Optimal {
                assert_eq!(rd.status, Status::Optimal, "restriction feasible but full not");
                assert!(
                    rd.objective <= rt.objective + 1e-7,
                    "x = {}: {} > {}",
                    x,
                    rd.objective,
                    rt.objective
                );
            }
        }
    }

    #[test]
    fn controller_template_matches_fresh_build() {
        let cfg = scalar_cfg(ControllerMode::DaDr, true);
        let ctrl = Controller::new(cfg.clone()).unwrap();
        for x in [-0.4, 0.0, 0.55] {
            let xk = dvector![x];
            let fresh = build_problem(&cfg, &xk).unwrap();
            let cached = ctrl.problem_at(&xk).unwrap();
            assert_eq!(fresh.problem.b_ineq.len(), cached.problem.b_ineq.len());
            for i in 0..fresh.problem.b_ineq.len() {
                assert!(
                    (fresh.problem.b_ineq[i] - cached.problem.b_ineq[i]).abs() < 1e-12,
                    "b mismatch at row {}",
                    i
                );
            }
            for k in 0..fresh.problem.fq.len() {
                assert!((fresh.problem.fq[k] - cached.problem.fq[k]).abs() < 1e-12);
            }
            let fs = solver::solve_qp(&fresh.problem, &cfg.settings).unwrap();
            let cs = solver::solve_qp(&cached.problem, &cfg.settings).unwrap();
            assert_eq!(fs.status, Status::Optimal);
            assert!((fs.objective - cs.objective).abs() < 1e-9);
        }
    }

    #[test]
    fn candidate_shift_stays_feasible_in_closed_loop() {
        use rand::prelude::*;
        let cfg = scalar_cfg(ControllerMode::DaDr, true);
        let mut ctrl = Controller::new(cfg.clone()).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(5);
        let mut x = dvector![0.2];
        for step in 0..12 {
            let res = ctrl.step(&x).unwrap();
            assert_eq!(res.status, Status::Optimal, "fault at step {}", step);
            let w = dvector![rng.gen_range(-0.1..0.1)];
            let x_next = ctrl.cfg.sys.step(&x, &res.u0, &w);
            let cand = candidate_shift(&res.policy, &w, &ctrl.cfg, &x).unwrap();
            let viol = ctrl.violation_of(&x_next, &cand).unwrap();
            assert!(viol <= 1e-6, "step {}: candidate violation {}", step, viol);
            x = x_next;
        }
    }
}
