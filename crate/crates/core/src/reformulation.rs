//! Linear constraint blocks of the per-step optimization problem.
//!
//! Every block is expressed over a shared prefix of decision variables (the
//! feedforward stack `c` and the dense feedback vector `v`) plus fresh local
//! auxiliaries, so independently built blocks can be concatenated into one
//! QP. The blocks are:
//!
//! - the distributionally robust CVaR block: for each chance row `j` and
//!   sample `i`, an epigraph row and a two-sided dual-norm box tie the fresh
//!   variables `(t, lambda, s_i, n_ji)` together, and a single budget row
//!   `lambda eps + mean(s) - alpha t <= 0` closes the construction;
//! - robust input rows, dualized over the disturbance support;
//! - robust terminal rows driving the step-`N_h` state into the terminal set
//!   for every admissible disturbance;
//! - the step-ahead blocks: the chance rows beyond step `t` are robustified
//!   against the first `t` disturbances through dual variables `y_tj` and
//!   the remainder runs through the same CVaR machinery on the tail
//!   ambiguity (samples truncated to their last `N_h - t` steps).
//!
//! The quadratic objective is the sample-average cost expanded over `(c, v)`.

use crate::ambiguity::{AmbiguityError, AmbiguitySpec};
use crate::lin_sys::{
    policy_action_on_disturbance, policy_map_for_input_row, CostSpec, PredictionMatrices,
};
use crate::polytope::{power_support, Polytope};
use crate::solver::{self, QpProblem, SolverSettings, SparseMat, Status};
use nalgebra::{DMatrix, DVector};
use std::ops::Range;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReformError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("terminal set is empty")]
    EmptyTerminalSet,
    #[error(transparent)]
    Ambiguity(#[from] AmbiguityError),
    #[error(transparent)]
    Solver(#[from] solver::SolverError),
}

/// Column address inside a block: shared feedforward entry, shared feedback
/// entry, or block-local auxiliary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Col {
    C(usize),
    V(usize),
    Local(usize),
}

/// A sparse linear row `sum coeffs <= rhs` (or `= rhs` for equality rows).
#[derive(Debug, Clone)]
pub struct LinRow {
    pub coeffs: Vec<(Col, f64)>,
    pub rhs: f64,
}

/// A self-contained group of constraints over `(c, v)` and local variables.
#[derive(Debug, Clone)]
pub struct ConstraintBlock {
    pub label: String,
    pub n_local: usize,
    pub ineq: Vec<LinRow>,
    pub eq: Vec<LinRow>,
    /// CVaR budget rows (also `<= rhs`), kept apart so diagnostics can
    /// minimize the budget expression instead of just testing it
    pub budget: Vec<LinRow>,
    /// local columns constrained to be nonnegative
    pub nonneg_locals: Vec<usize>,
    /// named local variable groups (per t/j/i where applicable)
    pub var_map: Vec<(String, Range<usize>)>,
}

impl ConstraintBlock {
    pub fn new(label: impl Into<String>) -> Self {
        ConstraintBlock {
            label: label.into(),
            n_local: 0,
            ineq: Vec::new(),
            eq: Vec::new(),
            budget: Vec::new(),
            nonneg_locals: Vec::new(),
            var_map: Vec::new(),
        }
    }

    fn alloc(&mut self, name: String, len: usize, nonneg: bool) -> Range<usize> {
        let range = self.n_local..self.n_local + len;
        if nonneg {
            self.nonneg_locals.extend(range.clone());
        }
        self.var_map.push((name, range.clone()));
        self.n_local += len;
        range
    }

    pub fn n_rows(&self) -> usize {
        self.ineq.len() + self.eq.len() + self.budget.len()
    }
}

/// One scalar chance row of the stacked state constraints, with everything
/// the reformulation needs precomputed: `F_j L_x`, `F_j L_u`, `F_j L_w`, the
/// policy map `V_j` and the bound `f_j`.
#[derive(Debug, Clone)]
pub struct ChanceRow {
    /// prediction step the row constrains (within 1..N_h-1)
    pub step: usize,
    pub f_x: DVector<f64>,
    pub f_u: DVector<f64>,
    pub f_w: DVector<f64>,
    pub v_map: DMatrix<f64>,
    pub rhs: f64,
}

/// Chance rows for steps `1..N_h-1`. The step-`N_h` state is excluded: it is
/// covered robustly by the terminal block.
pub fn build_chance_rows(state_con: &Polytope, pred: &PredictionMatrices) -> Vec<ChanceRow> {
    let (n_x, n_h) = (pred.n_x, pred.n_h);
    assert_eq!(state_con.dim(), n_x, "state constraint dimension mismatch");
    let mut rows = Vec::new();
    for step in 1..n_h {
        for r in 0..state_con.n_rows() {
            let mut stacked = DVector::zeros(n_x * n_h);
            stacked
                .rows_mut((step - 1) * n_x, n_x)
                .copy_from(&state_con.m.row(r).transpose());
            let f_x = (stacked.transpose() * &pred.l_x).transpose();
            let f_u = (stacked.transpose() * &pred.l_u).transpose();
            let f_w = (stacked.transpose() * &pred.l_w).transpose();
            let v_map = policy_map_for_input_row(&f_u, pred.n_h, pred.n_u, pred.n_w);
            rows.push(ChanceRow { step, f_x, f_u, f_w, v_map, rhs: state_con.b[r] });
        }
    }
    rows
}

/// Row data handed to the shared CVaR emitter: the tail disturbance
/// coefficients (as a linear map of `v` plus a constant), any extra decision
/// terms entering the row affinely, and the constant right-hand side.
struct CvarRowData {
    v_coef: DMatrix<f64>,
    w_const: DVector<f64>,
    extra: Vec<(Col, f64)>,
    rhs: f64,
}

/// Coordinates a row can actually reach (the longest prefix with a nonzero
/// feedback column or disturbance constant) and the support rows touching
/// them. Auxiliaries for coordinates beyond the reach are provably zero at
/// any feasible point, so they are only emitted when a kept support row
/// crosses into the dead coordinates (which never happens for stepwise
/// block-diagonal supports). The projection onto the shared variables is
/// unchanged either way.
fn active_structure(
    support: &Polytope,
    v_coef: &DMatrix<f64>,
    w_const: &DVector<f64>,
) -> (usize, Vec<usize>) {
    let d = support.dim();
    let mut active = 0;
    for c in (0..d).rev() {
        if w_const[c] != 0.0 || (0..v_coef.ncols()).any(|k| v_coef[(c, k)] != 0.0) {
            active = c + 1;
            break;
        }
    }
    let mut keep: Vec<usize> = Vec::new();
    let mut pure = true;
    for r in 0..support.n_rows() {
        let touches_active = (0..active).any(|c| support.m[(r, c)] != 0.0);
        let touches_dead = (active..d).any(|c| support.m[(r, c)] != 0.0);
        if touches_active {
            keep.push(r);
            pure &= !touches_dead;
        }
    }
    if !pure {
        // mixed rows couple dead and active coordinates: fall back to the
        // full-dimensional form
        return (d, (0..support.n_rows()).collect());
    }
    (active, keep)
}

/// Emit the CVaR machinery for `max_j` over `rows` of
/// `extra_j + (v_coef_j v + w_const_j)' w - rhs_j` with the ambiguity `spec`
/// over `w`. Fresh `(t, lambda, s_i, n_ji)` are allocated inside `block`.
fn emit_cvar(
    block: &mut ConstraintBlock,
    rows: &[CvarRowData],
    spec: &AmbiguitySpec,
    tag: &str,
) -> Result<(), ReformError> {
    if spec.support.n_rows() == 0 {
        return Err(ReformError::InvalidInput("ambiguity support has no rows".into()));
    }
    if !(spec.alpha > 0.0 && spec.alpha < 1.0) {
        return Err(ReformError::InvalidInput("alpha must lie in (0, 1)".into()));
    }
    let n = spec.n_samples();
    let d = spec.dim();

    let t = block.alloc(format!("{tag}t"), 1, false).start;
    let lam = block.alloc(format!("{tag}lambda"), 1, true).start;
    let s = block.alloc(format!("{tag}s"), n, true);

    let mut budget = LinRow { coeffs: vec![(Col::Local(lam), spec.epsilon)], rhs: 0.0 };
    for i in 0..n {
        budget.coeffs.push((Col::Local(s.start + i), 1.0 / n as f64));
    }
    budget.coeffs.push((Col::Local(t), -spec.alpha));
    block.budget.push(budget);

    for (j, row) in rows.iter().enumerate() {
        assert_eq!(row.v_coef.nrows(), d, "tail coefficient dimension mismatch");
        assert_eq!(row.w_const.len(), d);
        let (active, keep) = active_structure(&spec.support, &row.v_coef, &row.w_const);
        for (i, w_hat) in spec.samples.iter().enumerate() {
            let nn = block.alloc(format!("{tag}n[{j},{i}]"), keep.len(), true);
            let m_w = &spec.support.m * w_hat;

            // epigraph row
            let mut epi = LinRow { coeffs: Vec::new(), rhs: row.rhs - row.w_const.dot(w_hat) };
            let v_coef_w = row.v_coef.transpose() * w_hat;
            for (k, coef) in v_coef_w.iter().enumerate() {
                if *coef != 0.0 {
                    epi.coeffs.push((Col::V(k), *coef));
                }
            }
            epi.coeffs.extend(row.extra.iter().copied());
            for (slot, &r) in keep.iter().enumerate() {
                let coef = spec.support.b[r] - m_w[r];
                if coef != 0.0 {
                    epi.coeffs.push((Col::Local(nn.start + slot), coef));
                }
            }
            epi.coeffs.push((Col::Local(t), 1.0));
            epi.coeffs.push((Col::Local(s.start + i), -1.0));
            block.ineq.push(epi);

            // two-sided dual-norm box per reachable coordinate
            for cdim in 0..active {
                let mut plus = LinRow { coeffs: Vec::new(), rhs: -row.w_const[cdim] };
                let mut minus = LinRow { coeffs: Vec::new(), rhs: row.w_const[cdim] };
                for k in 0..row.v_coef.ncols() {
                    let coef = row.v_coef[(cdim, k)];
                    if coef != 0.0 {
                        plus.coeffs.push((Col::V(k), coef));
                        minus.coeffs.push((Col::V(k), -coef));
                    }
                }
                for (slot, &r) in keep.iter().enumerate() {
                    let coef = spec.support.m[(r, cdim)];
                    if coef != 0.0 {
                        plus.coeffs.push((Col::Local(nn.start + slot), -coef));
                        minus.coeffs.push((Col::Local(nn.start + slot), coef));
                    }
                }
                plus.coeffs.push((Col::Local(lam), -1.0));
                minus.coeffs.push((Col::Local(lam), -1.0));
                block.ineq.push(plus);
                block.ineq.push(minus);
            }
        }
    }
    Ok(())
}

/// Distributionally robust CVaR block over the chance rows.
pub fn dr_cvar_block(
    x_k: &DVector<f64>,
    rows: &[ChanceRow],
    spec: &AmbiguitySpec,
) -> Result<ConstraintBlock, ReformError> {
    let mut block = ConstraintBlock::new("dr");
    if rows.is_empty() {
        return Ok(block);
    }
    let data: Vec<CvarRowData> = rows
        .iter()
        .map(|row| CvarRowData {
            v_coef: row.v_map.clone(),
            w_const: row.f_w.clone(),
            extra: row
                .f_u
                .iter()
                .enumerate()
                .filter(|(_, &c)| c != 0.0)
                .map(|(k, &c)| (Col::C(k), c))
                .collect(),
            rhs: row.rhs - row.f_x.dot(x_k),
        })
        .collect();
    emit_cvar(&mut block, &data, spec, "")?;
    Ok(block)
}

/// Dualize `sup_{w in w_poly} (v_coef v + w_const)' w` into equality rows
/// `M' z = v_coef v + w_const`, `z >= 0`; the caller charges `m' z` wherever
/// the supremum appears.
fn alloc_robust_dual(
    block: &mut ConstraintBlock,
    name: String,
    w_poly: &Polytope,
    v_coef: &DMatrix<f64>,
    w_const: &DVector<f64>,
) -> (Range<usize>, Vec<usize>) {
    let d = w_poly.dim();
    assert_eq!(v_coef.nrows(), d);
    let (active, keep) = active_structure(w_poly, v_coef, w_const);
    let z = block.alloc(name, keep.len(), true);
    for cdim in 0..active {
        let mut row = LinRow { coeffs: Vec::new(), rhs: w_const[cdim] };
        for (slot, &r) in keep.iter().enumerate() {
            let coef = w_poly.m[(r, cdim)];
            if coef != 0.0 {
                row.coeffs.push((Col::Local(z.start + slot), coef));
            }
        }
        for k in 0..v_coef.ncols() {
            let coef = v_coef[(cdim, k)];
            if coef != 0.0 {
                row.coeffs.push((Col::V(k), -coef));
            }
        }
        block.eq.push(row);
    }
    (z, keep)
}

/// Hard input constraints `G u <= g` for every disturbance in the support,
/// one dual vector per stacked input row.
pub fn robust_input_block(
    pred: &PredictionMatrices,
    input_con: &Polytope,
    w_power: &Polytope,
) -> Result<ConstraintBlock, ReformError> {
    let mut block = ConstraintBlock::new("input");
    let (n_u, n_h) = (pred.n_u, pred.n_h);
    if input_con.dim() != n_u {
        return Err(ReformError::InvalidInput("input constraint dimension mismatch".into()));
    }
    for step in 0..n_h {
        for r in 0..input_con.n_rows() {
            let mut rho = DVector::zeros(n_u * n_h);
            rho.rows_mut(step * n_u, n_u).copy_from(&input_con.m.row(r).transpose());
            let v_map = policy_map_for_input_row(&rho, n_h, n_u, pred.n_w);
            let (z, keep) = alloc_robust_dual(
                &mut block,
                format!("z[{step},{r}]"),
                w_power,
                &v_map,
                &DVector::zeros(w_power.dim()),
            );
            let mut row = LinRow { coeffs: Vec::new(), rhs: input_con.b[r] };
            for (k, &coef) in rho.iter().enumerate() {
                if coef != 0.0 {
                    row.coeffs.push((Col::C(k), coef));
                }
            }
            for (slot, &zr) in keep.iter().enumerate() {
                if w_power.b[zr] != 0.0 {
                    row.coeffs.push((Col::Local(z.start + slot), w_power.b[zr]));
                }
            }
            block.ineq.push(row);
        }
    }
    Ok(block)
}

/// Internal helper shared by the terminal block and the step-ahead blocks:
/// drive the step-`N_h` state into `x_f` for every disturbance stack.
fn emit_terminal_rows(
    block: &mut ConstraintBlock,
    x_k: &DVector<f64>,
    pred: &PredictionMatrices,
    x_f: &Polytope,
    w_power: &Polytope,
    prefix: &str,
) {
    let lu_last = pred.last_block_u();
    let lw_last = pred.last_block_w();
    let lx_last = pred.last_block_x();
    for r in 0..x_f.n_rows() {
        let f_row = x_f.m.row(r);
        let rho = (f_row * &lu_last).transpose();
        let a_w = (f_row * &lw_last).transpose();
        let v_map = policy_map_for_input_row(&rho, pred.n_h, pred.n_u, pred.n_w);
        let (z, keep) = alloc_robust_dual(block, format!("{prefix}zf[{r}]"), w_power, &v_map, &a_w);
        let mut row = LinRow {
            coeffs: Vec::new(),
            rhs: x_f.b[r] - (f_row * &lx_last * x_k)[0],
        };
        for (k, &coef) in rho.iter().enumerate() {
            if coef != 0.0 {
                row.coeffs.push((Col::C(k), coef));
            }
        }
        for (slot, &zr) in keep.iter().enumerate() {
            if w_power.b[zr] != 0.0 {
                row.coeffs.push((Col::Local(z.start + slot), w_power.b[zr]));
            }
        }
        block.ineq.push(row);
    }
}

/// Robust terminal constraint `x_{N_h} in X_f` for all disturbances.
pub fn robust_terminal_block(
    x_k: &DVector<f64>,
    pred: &PredictionMatrices,
    x_f: &Polytope,
    w_power: &Polytope,
) -> Result<ConstraintBlock, ReformError> {
    if x_f.n_rows() == 0 {
        return Err(ReformError::EmptyTerminalSet);
    }
    let mut block = ConstraintBlock::new("term");
    emit_terminal_rows(&mut block, x_k, pred, x_f, w_power, "");
    Ok(block)
}

/// Step-ahead block for a fixed `t` in `1..N_h-1`: the chance rows of steps
/// `t+1..N_h-1` are made robust to the first `t` disturbance realizations
/// (dual variables `y_tj`), the remainder is chance-constrained over the
/// tail ambiguity, and the robust terminal condition rides along with fresh
/// duals.
pub fn t_step_block(
    t: usize,
    x_k: &DVector<f64>,
    pred: &PredictionMatrices,
    rows: &[ChanceRow],
    spec: &AmbiguitySpec,
    w_single: &Polytope,
    x_f: &Polytope,
) -> Result<ConstraintBlock, ReformError> {
    let n_h = pred.n_h;
    if t < 1 || t >= n_h {
        return Err(ReformError::InvalidInput(format!(
            "step-ahead index {} outside 1..{}",
            t,
            n_h - 1
        )));
    }
    let n_w = pred.n_w;
    let mut block = ConstraintBlock::new(format!("rf{t}"));
    let w_first = power_support(w_single, t);
    let tail_steps = n_h - t;
    let w_tail = power_support(w_single, tail_steps);
    let retained: Vec<&ChanceRow> = rows.iter().filter(|r| r.step > t).collect();

    if !retained.is_empty() {
        let tail_spec = spec.slice_steps(n_w, t, tail_steps, w_tail)?;
        let mut data = Vec::with_capacity(retained.len());
        for (j, row) in retained.iter().enumerate() {
            // first-t worst case: M_Wt' y = V_j^(1) v + F_wj^(1)
            let v_first = row.v_map.rows(0, t * n_w).into_owned();
            let w_const_first = row.f_w.rows(0, t * n_w).into_owned();
            let (y, keep) = alloc_robust_dual(
                &mut block,
                format!("y[{j}]"),
                &w_first,
                &v_first,
                &w_const_first,
            );
            let mut extra: Vec<(Col, f64)> = row
                .f_u
                .iter()
                .enumerate()
                .filter(|(_, &c)| c != 0.0)
                .map(|(k, &c)| (Col::C(k), c))
                .collect();
            for (slot, &yr) in keep.iter().enumerate() {
                if w_first.b[yr] != 0.0 {
                    extra.push((Col::Local(y.start + slot), w_first.b[yr]));
                }
            }
            data.push(CvarRowData {
                v_coef: row.v_map.rows(t * n_w, tail_steps * n_w).into_owned(),
                w_const: row.f_w.rows(t * n_w, tail_steps * n_w).into_owned(),
                extra,
                rhs: row.rhs - row.f_x.dot(x_k),
            });
        }
        emit_cvar(&mut block, &data, &tail_spec, "")?;
    }

    // robust terminal condition under all first-t realizations (within the
    // horizon this is the full robust terminal constraint, carried with its
    // own duals so the block stays self-contained)
    let w_full = power_support(w_single, n_h);
    emit_terminal_rows(&mut block, x_k, pred, x_f, &w_full, "");
    Ok(block)
}

/// Quadratic objective over `(c, v)`.
#[derive(Debug, Clone)]
pub struct ObjectiveQuad {
    pub hq: DMatrix<f64>,
    pub fq: DVector<f64>,
    pub constant: f64,
}

/// Sample-average cost: stage costs over predicted states/inputs for each
/// sample trajectory plus the terminal quadratic, expanded into
/// `1/2 z' Hq z + fq' z + const` with `z = (c, v)`. Stage 0 contributes the
/// constant `|x_k|_Q^2` and the input term for `u_0 = c_0`.
pub fn assemble_objective(
    x_k: &DVector<f64>,
    pred: &PredictionMatrices,
    cost: &CostSpec,
    p_terminal: &DMatrix<f64>,
    samples: &[DVector<f64>],
) -> Result<ObjectiveQuad, ReformError> {
    let (n_x, n_u, n_w, n_h) = (pred.n_x, pred.n_u, pred.n_w, pred.n_h);
    if samples.is_empty() {
        return Err(ReformError::InvalidInput("objective needs at least one sample".into()));
    }
    let n_c = n_u * n_h;
    let n_v = crate::lin_sys::policy_dim(n_h, n_u, n_w);
    let n_z = n_c + n_v;

    // block weights over the state stack: Q for steps 1..N_h-1, P at N_h
    let mut q_bar = DMatrix::zeros(n_x * n_h, n_x * n_h);
    for s in 0..n_h - 1 {
        q_bar.view_mut((s * n_x, s * n_x), (n_x, n_x)).copy_from(&cost.q);
    }
    q_bar
        .view_mut(((n_h - 1) * n_x, (n_h - 1) * n_x), (n_x, n_x))
        .copy_from(p_terminal);
    let mut r_bar = DMatrix::zeros(n_u * n_h, n_u * n_h);
    for s in 0..n_h {
        r_bar.view_mut((s * n_u, s * n_u), (n_u, n_u)).copy_from(&cost.r);
    }

    let mut hq = DMatrix::zeros(n_z, n_z);
    let mut fq = DVector::zeros(n_z);
    let mut constant = (x_k.transpose() * &cost.q * x_k)[0];
    let n = samples.len() as f64;
    for w_hat in samples {
        if w_hat.len() != n_w * n_h {
            return Err(ReformError::InvalidInput("sample length mismatch".into()));
        }
        // u = T z, with T = [I | S(w_hat)]
        let s_mat = policy_action_on_disturbance(w_hat, n_h, n_u, n_w);
        let mut t_mat = DMatrix::zeros(n_u * n_h, n_z);
        t_mat.view_mut((0, 0), (n_u * n_h, n_c)).copy_from(&DMatrix::identity(n_u * n_h, n_c));
        t_mat.view_mut((0, n_c), (n_u * n_h, n_v)).copy_from(&s_mat);
        let m_mat = &pred.l_u * &t_mat;
        let d_vec = &pred.l_x * x_k + &pred.l_w * w_hat;

        hq += (m_mat.transpose() * &q_bar * &m_mat + t_mat.transpose() * &r_bar * &t_mat)
            * (2.0 / n);
        fq += m_mat.transpose() * &q_bar * &d_vec * (2.0 / n);
        constant += (d_vec.transpose() * &q_bar * &d_vec)[0] / n;
    }
    hq = (&hq + hq.transpose()) * 0.5;

    let min_eig =
        hq.clone().symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min_eig < -1e-9 {
        return Err(ReformError::InvalidInput(format!(
            "objective not positive semidefinite (eigenvalue {:.3e})",
            min_eig
        )));
    }
    if min_eig < 0.0 {
        hq += DMatrix::identity(n_z, n_z) * (-min_eig);
    }
    Ok(ObjectiveQuad { hq, fq, constant })
}

/// The concatenation of blocks over a global column layout
/// `[c | v | block locals...]`, as a ready-to-solve problem.
#[derive(Debug, Clone)]
pub struct Assembled {
    pub problem: QpProblem,
    pub var_map: Vec<(String, Range<usize>)>,
    pub n_c: usize,
    pub n_v: usize,
}

pub fn assemble(
    n_c: usize,
    n_v: usize,
    blocks: &[ConstraintBlock],
    objective: Option<&ObjectiveQuad>,
) -> Assembled {
    let n_shared = n_c + n_v;
    let mut offsets = Vec::with_capacity(blocks.len());
    let mut n_vars = n_shared;
    for b in blocks {
        offsets.push(n_vars);
        n_vars += b.n_local;
    }
    let mut p = QpProblem::new(n_vars);
    let mut var_map: Vec<(String, Range<usize>)> = Vec::new();
    var_map.push(("c".into(), 0..n_c));
    var_map.push(("v".into(), n_c..n_shared));

    let col_of = |block_idx: usize, col: Col| -> usize {
        match col {
            Col::C(k) => {
                debug_assert!(k < n_c);
                k
            }
            Col::V(k) => {
                debug_assert!(k < n_v);
                n_c + k
            }
            Col::Local(k) => offsets[block_idx] + k,
        }
    };

    let mut n_ineq = 0;
    let mut n_eq = 0;
    for b in blocks {
        n_ineq += b.ineq.len() + b.budget.len();
        n_eq += b.eq.len();
    }
    p.a_ineq = SparseMat::zeros(n_ineq, n_vars);
    p.b_ineq = vec![0.0; n_ineq];
    p.a_eq = SparseMat::zeros(n_eq, n_vars);
    p.b_eq = vec![0.0; n_eq];

    let mut ri = 0;
    let mut re = 0;
    for (bi, b) in blocks.iter().enumerate() {
        for row in b.ineq.iter().chain(&b.budget) {
            for &(col, val) in &row.coeffs {
                p.a_ineq.push(ri, col_of(bi, col), val);
            }
            p.b_ineq[ri] = row.rhs;
            ri += 1;
        }
        for row in &b.eq {
            for &(col, val) in &row.coeffs {
                p.a_eq.push(re, col_of(bi, col), val);
            }
            p.b_eq[re] = row.rhs;
            re += 1;
        }
        for &local in &b.nonneg_locals {
            p.lb[offsets[bi] + local] = 0.0;
        }
        for (name, range) in &b.var_map {
            var_map.push((
                format!("{}/{}", b.label, name),
                offsets[bi] + range.start..offsets[bi] + range.end,
            ));
        }
    }

    if let Some(obj) = objective {
        assert_eq!(obj.hq.nrows(), n_shared, "objective must cover (c, v)");
        for i in 0..n_shared {
            for j in 0..n_shared {
                p.hq.push(i, j, obj.hq[(i, j)]);
            }
            p.fq[i] = obj.fq[i];
        }
        p.obj_const = obj.constant;
    }
    Assembled { problem: p, var_map, n_c, n_v }
}

/// Minimum achievable worst violation over all auxiliaries with `(c, v)`
/// pinned: solves `min sigma` subject to every inequality row relaxed by
/// `sigma` (equalities and sign constraints stay hard). Nonpositive values
/// mean the pinned point is feasible; the value is the negative margin.
pub fn feasibility_violation(
    assembled: &Assembled,
    c: &DVector<f64>,
    v: &DVector<f64>,
    settings: &SolverSettings,
) -> Result<f64, ReformError> {
    let base = &assembled.problem;
    let n = base.n_vars;
    let mut p = QpProblem::new(n + 1);
    let sigma = n;
    p.a_ineq = base.a_ineq.clone();
    p.a_ineq.ncols = n + 1;
    for r in 0..base.a_ineq.nrows {
        p.a_ineq.push(r, sigma, -1.0);
    }
    p.b_ineq = base.b_ineq.clone();
    p.a_eq = base.a_eq.clone();
    p.a_eq.ncols = n + 1;
    p.b_eq = base.b_eq.clone();
    p.lb[..n].copy_from_slice(&base.lb);
    p.ub[..n].copy_from_slice(&base.ub);
    p.lb[sigma] = -1e3;
    p.fq[sigma] = 1.0;

    let start = p.a_eq.nrows;
    p.a_eq.nrows += assembled.n_c + assembled.n_v;
    for k in 0..assembled.n_c {
        p.a_eq.push(start + k, k, 1.0);
        p.b_eq.push(c[k]);
    }
    for k in 0..assembled.n_v {
        p.a_eq.push(start + assembled.n_c + k, assembled.n_c + k, 1.0);
        p.b_eq.push(v[k]);
    }

    let sol = solver::solve_lp(&p, settings)?;
    match sol.status {
        Status::Optimal => Ok(sol.z[sigma]),
        Status::Infeasible => Ok(f64::INFINITY),
        other => Err(ReformError::InvalidInput(format!(
            "feasibility LP ended with status {:?}",
            other
        ))),
    }
}

/// Worst-case CVaR value encoded by a DR-CVaR block at a pinned `(c, v)`:
/// minimizes the budget expression over the auxiliaries subject to the
/// block's other rows, divided by alpha. Nonpositive iff the block is
/// feasible at this point.
pub fn cvar_value_at(
    x_k: &DVector<f64>,
    rows: &[ChanceRow],
    spec: &AmbiguitySpec,
    n_c: usize,
    n_v: usize,
    c: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<f64, ReformError> {
    let block = dr_cvar_block(x_k, rows, spec)?;
    let budget = block.budget.clone();
    let stripped = ConstraintBlock { budget: Vec::new(), ..block };
    let assembled = assemble(n_c, n_v, std::slice::from_ref(&stripped), None);
    let mut p = assembled.problem;
    let offset = n_c + n_v;
    for row in &budget {
        for &(col, val) in &row.coeffs {
            let g = match col {
                Col::C(k) => k,
                Col::V(k) => n_c + k,
                Col::Local(k) => offset + k,
            };
            p.fq[g] += val;
        }
    }
    let start = p.a_eq.nrows;
    p.a_eq.nrows += n_c + n_v;
    for k in 0..n_c {
        p.a_eq.push(start + k, k, 1.0);
        p.b_eq.push(c[k]);
    }
    for k in 0..n_v {
        p.a_eq.push(start + n_c + k, n_c + k, 1.0);
        p.b_eq.push(v[k]);
    }
    let sol = solver::solve_lp(&p, &SolverSettings::default())?;
    match sol.status {
        Status::Optimal => Ok(sol.objective / spec.alpha),
        other => Err(ReformError::InvalidInput(format!(
            "CVaR value LP ended with status {:?}",
            other
        ))),
    }
}

/// Support function of `w_poly` in direction `a`, computed through the dual
/// LP `min m' z` s.t. `M' z = a`, `z >= 0` (the same program the robust
/// blocks embed as constraints).
pub fn support_via_dual(w_poly: &Polytope, a: &DVector<f64>) -> Result<f64, ReformError> {
    let rows_m = w_poly.n_rows();
    let d = w_poly.dim();
    let mut p = QpProblem::new(rows_m);
    for r in 0..rows_m {
        p.fq[r] = w_poly.b[r];
        p.lb[r] = 0.0;
    }
    p.a_eq = SparseMat::zeros(d, rows_m);
    p.b_eq = a.iter().copied().collect();
    for cdim in 0..d {
        for r in 0..rows_m {
            let coef = w_poly.m[(r, cdim)];
            if coef != 0.0 {
                p.a_eq.push(cdim, r, coef);
            }
        }
    }
    let sol = solver::solve_lp(&p, &SolverSettings::default())?;
    match sol.status {
        Status::Optimal => Ok(sol.objective),
        other => Err(ReformError::InvalidInput(format!("dual support LP status {:?}", other))),
    }
}
