//! LP and convex-QP solving with a uniform status/result contract.
//!
//! Problems are stated as
//! ```text
//!     minimize    1/2 z' Hq z + fq' z + const
//!     subject to  A_eq z  = b_eq
//!                 A_in z <= b_in
//!                 lb <= z <= ub
//! ```
//! and handed to Clarabel's primal-dual interior-point method. Every solve
//! returns a [`Solution`] carrying the primal point, a status from the fixed
//! four-value contract and the KKT residuals evaluated by [`check_kkt`].

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus, SupportedConeT,
    ZeroConeT,
};
use serde::Serialize;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("inconsistent problem dimensions: {0}")]
    Dimensions(String),
    #[error("problem rejected by backend: {0}")]
    Backend(String),
}

/// Sparse matrix in triplet form. Rows/cols are only bounds-checked when the
/// matrix is materialized, so builders can push entries in any order.
#[derive(Debug, Clone, Default)]
pub struct SparseMat {
    pub nrows: usize,
    pub ncols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMat {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        SparseMat { nrows, ncols, entries: Vec::new() }
    }

    pub fn push(&mut self, row: usize, col: usize, val: f64) {
        if val != 0.0 {
            self.entries.push((row, col, val));
        }
    }

    /// y = A x
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        for &(r, c, v) in &self.entries {
            y[r] += v * x[c];
        }
        y
    }

    /// y = A' x
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        for &(r, c, v) in &self.entries {
            y[c] += v * x[r];
        }
        y
    }

    fn to_csc(&self, upper_only: bool) -> CscMatrix<f64> {
        let mut tri: Vec<(usize, usize, f64)> = self
            .entries
            .iter()
            .filter(|(r, c, _)| !upper_only || r <= c)
            .copied()
            .collect();
        tri.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut colptr = vec![0usize; self.ncols + 1];
        let mut rowval: Vec<usize> = Vec::with_capacity(tri.len());
        let mut nzval: Vec<f64> = Vec::with_capacity(tri.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in tri {
            if last == Some((c, r)) {
                *nzval.last_mut().unwrap() += v;
            } else {
                rowval.push(r);
                nzval.push(v);
                colptr[c + 1] += 1;
                last = Some((c, r));
            }
        }
        for c in 0..self.ncols {
            colptr[c + 1] += colptr[c];
        }
        CscMatrix::new(self.nrows, self.ncols, colptr, rowval, nzval)
    }
}

/// Outcome classes of a solve. `Optimal` guarantees KKT residuals within the
/// configured tolerances; the other statuses carry whatever iterate the
/// backend stopped at, with residuals reported as-is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct KktResiduals {
    /// max equality/inequality/bound violation, relative to 1 + |b|_inf
    pub primal: f64,
    /// stationarity residual, relative to 1 + |fq|_inf + |Hq z|_inf
    pub dual: f64,
    /// max |multiplier * slack| over inequality rows, relative to 1 + |obj|
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.complementarity)
    }
}

/// Dual multipliers in the row order of the source problem.
#[derive(Debug, Clone)]
pub struct DualVars {
    pub eq: Vec<f64>,
    pub ineq: Vec<f64>,
    /// multipliers for z <= ub rows (same length as n_vars, zero where ub = inf)
    pub upper: Vec<f64>,
    /// multipliers for -z <= -lb rows
    pub lower: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub z: Vec<f64>,
    pub status: Status,
    pub objective: f64,
    pub kkt: KktResiduals,
    pub duals: Option<DualVars>,
    pub iterations: u32,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverSettings {
    pub tol_feas: f64,
    pub tol_gap: f64,
    pub max_iter: u32,
    pub verbose: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { tol_feas: 1e-9, tol_gap: 1e-9, max_iter: 200, verbose: false }
    }
}

/// A quadratic (or, with `hq` empty, linear) program in standard form.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub n_vars: usize,
    /// full symmetric quadratic term (not just a triangle)
    pub hq: SparseMat,
    pub fq: Vec<f64>,
    pub obj_const: f64,
    pub a_eq: SparseMat,
    pub b_eq: Vec<f64>,
    pub a_ineq: SparseMat,
    pub b_ineq: Vec<f64>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
}

impl QpProblem {
    pub fn new(n_vars: usize) -> Self {
        QpProblem {
            n_vars,
            hq: SparseMat::zeros(n_vars, n_vars),
            fq: vec![0.0; n_vars],
            obj_const: 0.0,
            a_eq: SparseMat::zeros(0, n_vars),
            b_eq: Vec::new(),
            a_ineq: SparseMat::zeros(0, n_vars),
            b_ineq: Vec::new(),
            lb: vec![f64::NEG_INFINITY; n_vars],
            ub: vec![f64::INFINITY; n_vars],
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let n = self.n_vars;
        let bad = |msg: String| Err(SolverError::Dimensions(msg));
        if self.fq.len() != n || self.lb.len() != n || self.ub.len() != n {
            return bad(format!("fq/lb/ub length must be {}", n));
        }
        if self.a_eq.ncols != n || self.a_ineq.ncols != n || self.hq.ncols != n || self.hq.nrows != n
        {
            return bad("matrix column counts must equal n_vars".into());
        }
        if self.a_eq.nrows != self.b_eq.len() || self.a_ineq.nrows != self.b_ineq.len() {
            return bad("rhs length must match matrix rows".into());
        }
        for &(r, c, v) in self.hq.entries.iter().chain(&self.a_eq.entries).chain(&self.a_ineq.entries)
        {
            if !v.is_finite() {
                return bad(format!("non-finite entry at ({}, {})", r, c));
            }
        }
        Ok(())
    }

    pub fn objective_at(&self, z: &[f64]) -> f64 {
        let hz = self.hq.mul_vec(z);
        let mut obj = self.obj_const;
        for i in 0..self.n_vars {
            obj += 0.5 * hz[i] * z[i] + self.fq[i] * z[i];
        }
        obj
    }

    /// Plain-text dump for external cross-checking. Format: a `key value`
    /// header followed by one coordinate block per matrix (`row col value`
    /// lines, 0-based) and one index-value block per vector; `end` closes
    /// each block. Infinite bounds are omitted from the `lb`/`ub` blocks.
    pub fn dump_standard_form(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# qp standard form v1");
        let _ = writeln!(out, "n_vars {}", self.n_vars);
        let _ = writeln!(out, "n_eq {}", self.a_eq.nrows);
        let _ = writeln!(out, "n_ineq {}", self.a_ineq.nrows);
        let _ = writeln!(out, "obj_const {}", self.obj_const);
        let mat = |out: &mut String, name: &str, m: &SparseMat| {
            let _ = writeln!(out, "matrix {} {} {} {}", name, m.nrows, m.ncols, m.entries.len());
            for &(r, c, v) in &m.entries {
                let _ = writeln!(out, "{} {} {}", r, c, v);
            }
            let _ = writeln!(out, "end");
        };
        let vec = |out: &mut String, name: &str, v: &[f64]| {
            let _ = writeln!(out, "vector {} {}", name, v.len());
            for (i, x) in v.iter().enumerate() {
                if x.is_finite() {
                    let _ = writeln!(out, "{} {}", i, x);
                }
            }
            let _ = writeln!(out, "end");
        };
        mat(&mut out, "hq", &self.hq);
        vec(&mut out, "fq", &self.fq);
        mat(&mut out, "a_eq", &self.a_eq);
        vec(&mut out, "b_eq", &self.b_eq);
        mat(&mut out, "a_ineq", &self.a_ineq);
        vec(&mut out, "b_ineq", &self.b_ineq);
        vec(&mut out, "lb", &self.lb);
        vec(&mut out, "ub", &self.ub);
        out
    }
}

/// Solve a linear program (`hq` must be empty).
pub fn solve_lp(problem: &QpProblem, settings: &SolverSettings) -> Result<Solution, SolverError> {
    if !problem.hq.entries.is_empty() {
        return Err(SolverError::Dimensions("solve_lp requires an empty quadratic term".into()));
    }
    solve_qp(problem, settings)
}

/// Solve a convex quadratic program.
pub fn solve_qp(problem: &QpProblem, settings: &SolverSettings) -> Result<Solution, SolverError> {
    problem.validate()?;
    let n = problem.n_vars;

    // Row stacking: [equalities; inequalities; finite upper bounds; finite
    // lower bounds], mapped onto a Zero cone followed by one Nonnegative cone.
    let mut a = SparseMat::zeros(0, n);
    let mut b: Vec<f64> = Vec::new();
    let mut row = 0usize;
    for &(r, c, v) in &problem.a_eq.entries {
        a.entries.push((row + r, c, v));
    }
    row += problem.a_eq.nrows;
    b.extend_from_slice(&problem.b_eq);
    let n_eq = problem.a_eq.nrows;

    for &(r, c, v) in &problem.a_ineq.entries {
        a.entries.push((row + r, c, v));
    }
    row += problem.a_ineq.nrows;
    b.extend_from_slice(&problem.b_ineq);

    let mut ub_rows: Vec<usize> = Vec::new();
    for (i, &u) in problem.ub.iter().enumerate() {
        if u.is_finite() {
            a.entries.push((row, i, 1.0));
            b.push(u);
            ub_rows.push(i);
            row += 1;
        }
    }
    let mut lb_rows: Vec<usize> = Vec::new();
    for (i, &l) in problem.lb.iter().enumerate() {
        if l.is_finite() {
            a.entries.push((row, i, -1.0));
            b.push(-l);
            lb_rows.push(i);
            row += 1;
        }
    }
    a.nrows = row;
    a.ncols = n;
    let n_nonneg = row - n_eq;

    let p_csc = problem.hq.to_csc(true);
    let a_csc = a.to_csc(false);
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    if n_eq > 0 {
        cones.push(ZeroConeT(n_eq));
    }
    if n_nonneg > 0 {
        cones.push(NonnegativeConeT(n_nonneg));
    }

    let cl_settings = DefaultSettings {
        verbose: settings.verbose,
        max_iter: settings.max_iter,
        tol_feas: settings.tol_feas,
        tol_gap_abs: settings.tol_gap,
        tol_gap_rel: settings.tol_gap,
        ..DefaultSettings::default()
    };
    let mut solver = DefaultSolver::new(&p_csc, &problem.fq, &a_csc, &b, &cones, cl_settings);
    solver.solve();
    let sol = &solver.solution;

    let status = match sol.status {
        SolverStatus::Solved => Status::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => Status::Infeasible,
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => Status::Unbounded,
        _ => Status::MaxIter,
    };

    let z = sol.x.clone();
    let mut duals = DualVars {
        eq: vec![0.0; n_eq],
        ineq: vec![0.0; problem.a_ineq.nrows],
        upper: vec![0.0; n],
        lower: vec![0.0; n],
    };
    if sol.z.len() == a.nrows {
        duals.eq.copy_from_slice(&sol.z[..n_eq]);
        duals.ineq.copy_from_slice(&sol.z[n_eq..n_eq + problem.a_ineq.nrows]);
        let mut k = n_eq + problem.a_ineq.nrows;
        for &i in &ub_rows {
            duals.upper[i] = sol.z[k];
            k += 1;
        }
        for &i in &lb_rows {
            duals.lower[i] = sol.z[k];
            k += 1;
        }
    }

    let kkt = check_kkt(problem, &z, Some(&duals));
    let objective = match status {
        Status::Optimal | Status::MaxIter => problem.objective_at(&z),
        _ => f64::NAN,
    };
    Ok(Solution { z, status, objective, kkt, duals: Some(duals), iterations: solver.info.iterations })
}

/// Evaluate KKT residuals at `z`. When multipliers are not supplied they are
/// estimated by a least-squares fit of the stationarity condition on the
/// active rows (inequality multipliers clipped to be nonnegative), so the
/// report stays a pure function of its inputs.
pub fn check_kkt(problem: &QpProblem, z: &[f64], duals: Option<&DualVars>) -> KktResiduals {
    let n = problem.n_vars;
    assert_eq!(z.len(), n, "check_kkt: point length mismatch");
    let hz = problem.hq.mul_vec(z);

    let mut b_scale: f64 = 0.0;
    for v in problem.b_eq.iter().chain(&problem.b_ineq) {
        b_scale = b_scale.max(v.abs());
    }
    for v in problem.lb.iter().chain(&problem.ub) {
        if v.is_finite() {
            b_scale = b_scale.max(v.abs());
        }
    }

    let mut primal: f64 = 0.0;
    let eq_res = problem.a_eq.mul_vec(z);
    for (i, r) in eq_res.iter().enumerate() {
        primal = primal.max((r - problem.b_eq[i]).abs());
    }
    let in_res = problem.a_ineq.mul_vec(z);
    for (i, r) in in_res.iter().enumerate() {
        primal = primal.max(r - problem.b_ineq[i]);
    }
    for i in 0..n {
        if problem.ub[i].is_finite() {
            primal = primal.max(z[i] - problem.ub[i]);
        }
        if problem.lb[i].is_finite() {
            primal = primal.max(problem.lb[i] - z[i]);
        }
    }

    let owned;
    let duals = match duals {
        Some(d) => d,
        None => {
            owned = estimate_duals(problem, z, &hz, &in_res);
            &owned
        }
    };

    let mut grad = vec![0.0; n];
    for i in 0..n {
        grad[i] = hz[i] + problem.fq[i] + duals.upper[i] - duals.lower[i];
    }
    let at_eq = problem.a_eq.tr_mul_vec(&duals.eq);
    let at_in = problem.a_ineq.tr_mul_vec(&duals.ineq);
    let mut dual_res: f64 = 0.0;
    let mut grad_scale: f64 = 0.0;
    for i in 0..n {
        dual_res = dual_res.max((grad[i] + at_eq[i] + at_in[i]).abs());
        grad_scale = grad_scale.max(hz[i].abs()).max(problem.fq[i].abs());
    }

    let obj = problem.objective_at(z);
    let mut compl: f64 = 0.0;
    for (i, r) in in_res.iter().enumerate() {
        compl = compl.max((duals.ineq[i] * (problem.b_ineq[i] - r)).abs());
    }
    for i in 0..n {
        if problem.ub[i].is_finite() {
            compl = compl.max((duals.upper[i] * (problem.ub[i] - z[i])).abs());
        }
        if problem.lb[i].is_finite() {
            compl = compl.max((duals.lower[i] * (z[i] - problem.lb[i])).abs());
        }
    }

    KktResiduals {
        primal: primal / (1.0 + b_scale),
        dual: dual_res / (1.0 + grad_scale),
        complementarity: compl / (1.0 + obj.abs()),
    }
}

/// Least-squares multipliers on the active set, used when the caller has no
/// duals at hand.
fn estimate_duals(problem: &QpProblem, z: &[f64], hz: &[f64], in_res: &[f64]) -> DualVars {
    use nalgebra::{DMatrix, DVector};
    let n = problem.n_vars;
    let act_tol = 1e-6 * (1.0 + z.iter().fold(0.0f64, |m, v| m.abs().max(v.abs())));

    // columns: all equality rows, then active inequality/bound rows
    #[derive(Clone, Copy)]
    enum RowKind {
        Eq(usize),
        In(usize),
        Ub(usize),
        Lb(usize),
    }
    let mut cols: Vec<RowKind> = (0..problem.a_eq.nrows).map(RowKind::Eq).collect();
    for (i, r) in in_res.iter().enumerate() {
        if (problem.b_ineq[i] - r).abs() <= act_tol {
            cols.push(RowKind::In(i));
        }
    }
    for i in 0..n {
        if problem.ub[i].is_finite() && (problem.ub[i] - z[i]).abs() <= act_tol {
            cols.push(RowKind::Ub(i));
        }
        if problem.lb[i].is_finite() && (z[i] - problem.lb[i]).abs() <= act_tol {
            cols.push(RowKind::Lb(i));
        }
    }

    let mut duals = DualVars {
        eq: vec![0.0; problem.a_eq.nrows],
        ineq: vec![0.0; problem.a_ineq.nrows],
        upper: vec![0.0; n],
        lower: vec![0.0; n],
    };
    if cols.is_empty() {
        return duals;
    }

    // rows of a_eq / a_ineq in dense form restricted to the active columns
    let mut eq_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); problem.a_eq.nrows];
    for &(r, c, v) in &problem.a_eq.entries {
        eq_rows[r].push((c, v));
    }
    let mut in_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); problem.a_ineq.nrows];
    for &(r, c, v) in &problem.a_ineq.entries {
        in_rows[r].push((c, v));
    }

    let mut mat = DMatrix::<f64>::zeros(n, cols.len());
    for (j, kind) in cols.iter().enumerate() {
        match *kind {
            RowKind::Eq(r) => {
                for &(c, v) in &eq_rows[r] {
                    mat[(c, j)] += v;
                }
            }
            RowKind::In(r) => {
                for &(c, v) in &in_rows[r] {
                    mat[(c, j)] += v;
                }
            }
            RowKind::Ub(i) => mat[(i, j)] = 1.0,
            RowKind::Lb(i) => mat[(i, j)] = -1.0,
        }
    }
    let rhs = DVector::from_iterator(n, (0..n).map(|i| -(hz[i] + problem.fq[i])));
    let svd = mat.svd(true, true);
    let y = svd.solve(&rhs, 1e-12).unwrap_or_else(|_| DVector::zeros(cols.len()));

    for (j, kind) in cols.iter().enumerate() {
        let mut v = y[j];
        match *kind {
            RowKind::Eq(r) => duals.eq[r] = v,
            RowKind::In(r) => {
                v = v.max(0.0);
                duals.ineq[r] = v;
            }
            RowKind::Ub(i) => duals.upper[i] = v.max(0.0),
            RowKind::Lb(i) => duals.lower[i] = v.max(0.0),
        }
    }
    duals
}
