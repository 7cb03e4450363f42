//! Halfspace polytopes `{ z : M z <= b }` and the set computations the
//! controller needs: support functions, Cartesian powers, redundancy
//! removal and the maximal robust positively invariant set.

use crate::solver::{self, QpProblem, SolverSettings, SparseMat, Status};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolytopeError {
    #[error("polytope is empty")]
    EmptySet,
    #[error("unbounded in the requested direction")]
    Unbounded,
    #[error("empty terminal set: the minimal invariant set exceeds the state constraints")]
    EmptyTerminalSet,
    #[error("invariant-set iteration not finitely determined within {0} steps")]
    NotFinitelyDetermined(usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Solver(#[from] solver::SolverError),
}

/// A polytope in halfspace form. Zero rows are allowed and represent the
/// whole space (used e.g. for "no input constraints").
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    pub m: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Polytope {
    pub fn new(m: DMatrix<f64>, b: DVector<f64>) -> Result<Self, PolytopeError> {
        if m.nrows() != b.len() {
            return Err(PolytopeError::InvalidInput(format!(
                "row count {} does not match rhs length {}",
                m.nrows(),
                b.len()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
            return Err(PolytopeError::InvalidInput("non-finite entry".into()));
        }
        Ok(Polytope { m, b })
    }

    /// The whole space in `dim` dimensions (no constraint rows).
    pub fn unbounded(dim: usize) -> Self {
        Polytope { m: DMatrix::zeros(0, dim), b: DVector::zeros(0) }
    }

    /// Axis-aligned box `lo <= z <= hi`.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Result<Self, PolytopeError> {
        if lo.len() != hi.len() {
            return Err(PolytopeError::InvalidInput("box bound lengths differ".into()));
        }
        let d = lo.len();
        let mut m = DMatrix::zeros(2 * d, d);
        let mut b = DVector::zeros(2 * d);
        for i in 0..d {
            m[(2 * i, i)] = 1.0;
            b[2 * i] = hi[i];
            m[(2 * i + 1, i)] = -1.0;
            b[2 * i + 1] = -lo[i];
        }
        Ok(Polytope { m, b })
    }

    /// The singleton `{0}`.
    pub fn singleton_origin(dim: usize) -> Self {
        Polytope::from_box(&vec![0.0; dim], &vec![0.0; dim]).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.m.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.m.nrows()
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        if self.n_rows() == 0 {
            return true;
        }
        let r = &self.m * z - &self.b;
        r.iter().all(|&v| v <= tol)
    }

    /// Chebyshev-style nonemptiness certificate: the largest inflation `t`
    /// with `Mz + |M_i| t <= b` still solvable. Nonnegative means nonempty.
    pub fn inflation_radius(&self) -> Result<f64, PolytopeError> {
        if self.n_rows() == 0 {
            return Ok(f64::INFINITY);
        }
        let d = self.dim();
        let mut p = QpProblem::new(d + 1);
        p.fq = vec![0.0; d + 1];
        p.fq[d] = -1.0;
        p.a_ineq = SparseMat::zeros(self.n_rows(), d + 1);
        for i in 0..self.n_rows() {
            for j in 0..d {
                p.a_ineq.push(i, j, self.m[(i, j)]);
            }
            p.a_ineq.push(i, d, self.m.row(i).norm());
        }
        p.b_ineq = self.b.iter().copied().collect();
        p.ub[d] = 1e6; // cap so unbounded sets do not break the certificate
        let s = solver::solve_lp(&p, &SolverSettings::default())?;
        match s.status {
            Status::Optimal => Ok(s.z[d]),
            Status::Unbounded => Ok(f64::INFINITY),
            _ => Err(PolytopeError::EmptySet),
        }
    }

    pub fn is_empty(&self) -> Result<bool, PolytopeError> {
        Ok(self.inflation_radius()? < -1e-9)
    }

    /// Axis-aligned bounding box via 2*dim support LPs.
    pub fn bounding_box(&self) -> Result<(DVector<f64>, DVector<f64>), PolytopeError> {
        let d = self.dim();
        let mut lo = DVector::zeros(d);
        let mut hi = DVector::zeros(d);
        for i in 0..d {
            let mut dir = DVector::zeros(d);
            dir[i] = 1.0;
            hi[i] = support_value(self, &dir)?;
            dir[i] = -1.0;
            lo[i] = -support_value(self, &dir)?;
        }
        Ok((lo, hi))
    }
}

/// `max_{z in poly} direction' z`, by LP.
pub fn support_value(poly: &Polytope, direction: &DVector<f64>) -> Result<f64, PolytopeError> {
    if direction.len() != poly.dim() {
        return Err(PolytopeError::InvalidInput("direction dimension mismatch".into()));
    }
    if direction.iter().all(|&v| v == 0.0) {
        return if poly.is_empty()? { Err(PolytopeError::EmptySet) } else { Ok(0.0) };
    }
    let d = poly.dim();
    let mut p = QpProblem::new(d);
    p.fq = direction.iter().map(|v| -v).collect();
    p.a_ineq = SparseMat::zeros(poly.n_rows(), d);
    for i in 0..poly.n_rows() {
        for j in 0..d {
            p.a_ineq.push(i, j, poly.m[(i, j)]);
        }
    }
    p.b_ineq = poly.b.iter().copied().collect();
    let s = solver::solve_lp(&p, &SolverSettings::default())?;
    match s.status {
        Status::Optimal => Ok(-s.objective),
        Status::Infeasible => Err(PolytopeError::EmptySet),
        Status::Unbounded => Err(PolytopeError::Unbounded),
        Status::MaxIter => Err(PolytopeError::InvalidInput("support LP did not converge".into())),
    }
}

/// Cartesian power `poly^copies` in halfspace form (block-diagonal rows).
pub fn power_support(poly: &Polytope, copies: usize) -> Polytope {
    assert!(copies >= 1, "power_support needs at least one copy");
    if copies == 1 {
        return poly.clone();
    }
    let (r, d) = (poly.n_rows(), poly.dim());
    let mut m = DMatrix::zeros(r * copies, d * copies);
    let mut b = DVector::zeros(r * copies);
    for k in 0..copies {
        m.view_mut((k * r, k * d), (r, d)).copy_from(&poly.m);
        b.rows_mut(k * r, r).copy_from(&poly.b);
    }
    Polytope { m, b }
}

/// Remove rows implied by the remaining ones. Each drop is certified by an
/// LP: the row's maximum over the other kept rows stays below its bound
/// (within 1e-9). The represented set is unchanged.
pub fn reduce_polytope(poly: &Polytope) -> Result<Polytope, PolytopeError> {
    if poly.is_empty()? {
        return Err(PolytopeError::EmptySet);
    }
    let n = poly.n_rows();
    let mut keep = vec![true; n];
    for r in 0..n {
        let others: Vec<usize> = (0..n).filter(|&i| i != r && keep[i]).collect();
        if others.is_empty() {
            continue;
        }
        let d = poly.dim();
        let mut p = QpProblem::new(d);
        p.fq = (0..d).map(|j| -poly.m[(r, j)]).collect();
        p.a_ineq = SparseMat::zeros(others.len() + 1, d);
        for (k, &i) in others.iter().enumerate() {
            for j in 0..d {
                p.a_ineq.push(k, j, poly.m[(i, j)]);
            }
        }
        // guard row keeps the LP bounded even when the row is essential
        for j in 0..d {
            p.a_ineq.push(others.len(), j, poly.m[(r, j)]);
        }
        p.b_ineq = others.iter().map(|&i| poly.b[i]).collect();
        p.b_ineq.push(poly.b[r] + 1.0);
        let s = solver::solve_lp(&p, &SolverSettings::default())?;
        if s.status == Status::Optimal && -s.objective <= poly.b[r] + 1e-9 {
            keep[r] = false;
        }
    }
    let rows: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
    let mut m = DMatrix::zeros(rows.len(), poly.dim());
    let mut b = DVector::zeros(rows.len());
    for (k, &i) in rows.iter().enumerate() {
        m.row_mut(k).copy_from(&poly.m.row(i));
        b[k] = poly.b[i];
    }
    Ok(Polytope { m, b })
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Scale a bounded polytope about its bounding-box center by `factor >= 1`
/// (same halfspace normals, relaxed offsets).
pub fn inflate_polytope(poly: &Polytope, factor: f64) -> Result<Polytope, PolytopeError> {
    if factor < 1.0 {
        return Err(PolytopeError::InvalidInput("inflation factor must be at least 1".into()));
    }
    let (lo, hi) = poly.bounding_box()?;
    let center = (lo + hi) * 0.5;
    let mc = &poly.m * &center;
    let b = &mc + (&poly.b - &mc) * factor;
    Polytope::new(poly.m.clone(), b)
}

/// Maximal robust positively invariant set of `x+ = A_cl x + D w`, `w in W`,
/// inside the state constraints `X` and the input constraints `U` mapped
/// through the terminal gain (`G K_f x <= g`).
///
/// Starts from `Omega_0 = X intersect {x : G K_f x <= g}` and intersects with
/// the one-step robust preimage until every candidate row is certified
/// redundant. Support-function tightening `b_i - supp_W(M_i D)` handles the
/// disturbance.
pub fn max_rpi_set(
    a_cl: &DMatrix<f64>,
    d: &DMatrix<f64>,
    w: &Polytope,
    x: &Polytope,
    u: &Polytope,
    k_f: &DMatrix<f64>,
) -> Result<Polytope, PolytopeError> {
    const MAX_ITER: usize = 200;
    let n_x = a_cl.ncols();
    if spectral_radius(a_cl) >= 1.0 {
        return Err(PolytopeError::InvalidInput("closed-loop matrix is not stable".into()));
    }
    if w.dim() != d.ncols() || x.dim() != n_x {
        return Err(PolytopeError::InvalidInput("dimension mismatch in RPI inputs".into()));
    }

    // rows are kept unit-norm so the certification LPs stay well scaled
    // across iterations (directions otherwise shrink geometrically)
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    let push_row = |rows: &mut Vec<(DVector<f64>, f64)>, dir: DVector<f64>, rhs: f64| {
        let norm = dir.norm();
        if norm > 1e-12 {
            rows.push((dir / norm, rhs / norm));
        }
    };
    for i in 0..x.n_rows() {
        push_row(&mut rows, x.m.row(i).transpose(), x.b[i]);
    }
    let gk = &u.m * k_f;
    for i in 0..u.n_rows() {
        push_row(&mut rows, gk.row(i).transpose(), u.b[i]);
    }
    if rows.is_empty() {
        return Err(PolytopeError::InvalidInput("no constraint rows for the terminal set".into()));
    }

    let as_poly = |rows: &[(DVector<f64>, f64)]| {
        let mut m = DMatrix::zeros(rows.len(), n_x);
        let mut b = DVector::zeros(rows.len());
        for (k, (v, c)) in rows.iter().enumerate() {
            m.row_mut(k).copy_from(&v.transpose());
            b[k] = *c;
        }
        Polytope { m, b }
    };

    let mut frontier: Vec<usize> = (0..rows.len()).collect();
    for _ in 0..MAX_ITER {
        let current = as_poly(&rows);
        if current.is_empty()? {
            return Err(PolytopeError::EmptyTerminalSet);
        }
        let mut added: Vec<usize> = Vec::new();
        for &i in &frontier {
            let (v, c) = (&rows[i].0, rows[i].1);
            let new_dir = a_cl.transpose() * v;
            let norm = new_dir.norm();
            let tight = support_value(w, &(d.transpose() * v))?;
            let new_rhs = c - tight;
            if norm <= 1e-12 {
                if new_rhs < -1e-12 {
                    return Err(PolytopeError::EmptyTerminalSet);
                }
                continue;
            }
            let new_dir = new_dir / norm;
            let new_rhs = new_rhs / norm;
            // redundancy certificate against the current set; razor-thin
            // iterates can defeat the LP before the emptiness check fires
            let sup = match support_value(&current, &new_dir) {
                Ok(s) => s,
                Err(PolytopeError::EmptySet) => return Err(PolytopeError::EmptyTerminalSet),
                Err(e) => {
                    if current.inflation_radius()? < 1e-7 {
                        return Err(PolytopeError::EmptyTerminalSet);
                    }
                    return Err(e);
                }
            };
            if sup > new_rhs + 1e-9 {
                rows.push((new_dir, new_rhs));
                added.push(rows.len() - 1);
            }
        }
        if added.is_empty() {
            let result = reduce_polytope(&as_poly(&rows))?;
            if result.is_empty()? {
                return Err(PolytopeError::EmptyTerminalSet);
            }
            return Ok(result);
        }
        frontier = added;
    }
    Err(PolytopeError::NotFinitelyDetermined(MAX_ITER))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use rand::prelude::*;

    fn interval(lo: f64, hi: f64) -> Polytope {
        Polytope::from_box(&[lo], &[hi]).unwrap()
    }

    #[test]
    fn support_unit_box() {
        let p = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let v = support_value(&p, &dvector![1.0, 0.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn support_symmetric_interval() {
        let p = interval(-1.0, 1.0);
        let v = support_value(&p, &dvector![-1.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn support_triangle_vertex() {
        // {x >= 0, y >= 0, x + y <= 2}; vertex enumeration gives 2 for (1,1).
        let m = dmatrix![-1.0, 0.0; 0.0, -1.0; 1.0, 1.0];
        let p = Polytope::new(m, dvector![0.0, 0.0, 2.0]).unwrap();
        let v = support_value(&p, &dvector![1.0, 1.0]).unwrap();
        assert!((v - 2.0).abs() < 1e-9);
    }

    #[test]
    fn support_reports_empty_and_unbounded() {
        let empty = Polytope::new(dmatrix![1.0; -1.0], dvector![0.0, -1.0]).unwrap();
        assert!(matches!(support_value(&empty, &dvector![1.0]), Err(PolytopeError::EmptySet)));
        let half = Polytope::new(dmatrix![-1.0], dvector![0.0]).unwrap();
        assert!(matches!(support_value(&half, &dvector![1.0]), Err(PolytopeError::Unbounded)));
    }

    #[test]
    fn power_single_copy_unchanged() {
        let p = interval(-1.0, 1.0);
        let q = power_support(&p, 1);
        assert_eq!(p, q);
    }

    #[test]
    fn power_square_from_interval() {
        let p = interval(-1.0, 1.0);
        let q = power_support(&p, 2);
        assert_eq!(q.n_rows(), 4);
        assert_eq!(q.dim(), 2);
        assert!(q.contains(&dvector![1.0, -1.0], 1e-12));
        assert!(!q.contains(&dvector![1.1, 0.0], 1e-12));
    }

    #[test]
    fn power_block_diagonal_pattern() {
        let m = dmatrix![1.0, 0.5; -1.0, 0.2; 0.0, 1.0];
        let p = Polytope::new(m, dvector![1.0, 1.0, 1.0]).unwrap();
        let q = power_support(&p, 4);
        assert_eq!(q.n_rows(), 12);
        for k in 0..4 {
            for i in 0..3 {
                for j in 0..2 {
                    assert_eq!(q.m[(k * 3 + i, k * 2 + j)], p.m[(i, j)]);
                }
            }
        }
        // off-diagonal blocks are zero
        assert_eq!(q.m[(0, 2)], 0.0);
        assert_eq!(q.m[(11, 0)], 0.0);
    }

    #[test]
    fn reduce_drops_duplicate_row() {
        let p = Polytope::new(dmatrix![1.0; 1.0; -1.0], dvector![1.0, 1.0, 1.0]).unwrap();
        let r = reduce_polytope(&p).unwrap();
        assert_eq!(r.n_rows(), 2);
    }

    #[test]
    fn reduce_drops_implied_row() {
        let p = Polytope::new(dmatrix![1.0; 1.0; -1.0], dvector![1.0, 2.0, 0.5]).unwrap();
        let r = reduce_polytope(&p).unwrap();
        assert_eq!(r.n_rows(), 2);
        let v = support_value(&r, &dvector![1.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn reduce_preserves_support_values() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let n = 20;
        let mut m = DMatrix::zeros(n, 2);
        let mut b = DVector::zeros(n);
        for i in 0..n {
            let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            m[(i, 0)] = ang.cos();
            m[(i, 1)] = ang.sin();
            b[i] = rng.gen_range(0.5..2.0);
        }
        let p = Polytope::new(m, b).unwrap();
        let r = reduce_polytope(&p).unwrap();
        assert!(r.n_rows() <= p.n_rows());
        for _ in 0..16 {
            let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let dir = dvector![ang.cos(), ang.sin()];
            let a = support_value(&p, &dir).unwrap();
            let b = support_value(&r, &dir).unwrap();
            assert!((a - b).abs() < 1e-8, "support changed: {} vs {}", a, b);
        }
    }

    #[test]
    fn rpi_scalar_fixed_point_at_start() {
        // a_cl = 0.5, w in [-1,1], X = [-4,4]: 0.5*4 + 1 = 3 <= 4, so X itself
        // is invariant and the iteration stops immediately.
        let a_cl = dmatrix![0.5];
        let d = dmatrix![1.0];
        let w = interval(-1.0, 1.0);
        let x = interval(-4.0, 4.0);
        let u = Polytope::unbounded(1);
        let kf = dmatrix![0.0];
        let r = max_rpi_set(&a_cl, &d, &w, &x, &u, &kf).unwrap();
        let hi = support_value(&r, &dvector![1.0]).unwrap();
        let lo = -support_value(&r, &dvector![-1.0]).unwrap();
        assert!((hi - 4.0).abs() < 1e-9 && (lo + 4.0).abs() < 1e-9);
    }

    #[test]
    fn rpi_scalar_empty() {
        // Shrinks [-1.8,1.8] -> [-1.6,1.6] -> [-1.2,1.2] -> [-0.4,0.4] -> empty.
        let a_cl = dmatrix![0.5];
        let d = dmatrix![1.0];
        let w = interval(-1.0, 1.0);
        let x = interval(-1.8, 1.8);
        let u = Polytope::unbounded(1);
        let kf = dmatrix![0.0];
        let r = max_rpi_set(&a_cl, &d, &w, &x, &u, &kf);
        assert!(matches!(r, Err(PolytopeError::EmptyTerminalSet)));
    }

    #[test]
    fn rpi_zero_disturbance_gives_nominal_invariant_set() {
        let a_cl = dmatrix![0.5];
        let d = dmatrix![1.0];
        let w = Polytope::singleton_origin(1);
        let x = interval(-4.0, 4.0);
        let u = Polytope::unbounded(1);
        let kf = dmatrix![0.0];
        let r = max_rpi_set(&a_cl, &d, &w, &x, &u, &kf).unwrap();
        let hi = support_value(&r, &dvector![1.0]).unwrap();
        assert!((hi - 4.0).abs() < 1e-9);
    }

    #[test]
    fn rpi_invariance_certificate_2d() {
        // A rotating contraction with box disturbance; verify the returned set
        // satisfies the invariance inequality row by row, maps into the input
        // set through K_f, and sits inside X.
        let a = dmatrix![0.9, 0.2; -0.1, 0.8];
        let b = dmatrix![0.0; 1.0];
        let kf = dmatrix![-0.4, -0.6];
        let a_cl = &a + &b * &kf;
        let d = dmatrix![1.0, 0.0; 0.0, 1.0];
        let w = Polytope::from_box(&[-0.05, -0.05], &[0.05, 0.05]).unwrap();
        let x = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let u = interval(-0.8, 0.8);
        let omega = max_rpi_set(&a_cl, &d, &w, &x, &u, &kf).unwrap();

        for i in 0..omega.n_rows() {
            let row = omega.m.row(i).transpose();
            let s_own = support_value(&omega, &(a_cl.transpose() * &row)).unwrap();
            let s_w = support_value(&w, &(d.transpose() * &row)).unwrap();
            assert!(
                s_own + s_w <= omega.b[i] + 1e-8,
                "row {} violates invariance: {} + {} > {}",
                i,
                s_own,
                s_w,
                omega.b[i]
            );
        }
        for i in 0..u.n_rows() {
            let dir = (u.m.row(i) * &kf).transpose();
            assert!(support_value(&omega, &dir).unwrap() <= u.b[i] + 1e-8);
        }
        for i in 0..x.n_rows() {
            let dir = x.m.row(i).transpose();
            assert!(support_value(&omega, &dir).unwrap() <= x.b[i] + 1e-8);
        }
    }
}
