//! Linear-system algebra: stacked prediction matrices over the horizon,
//! vectorization of the disturbance-feedback gain, the bilinear policy maps,
//! Riccati/Lyapunov solves and steady-state target shifting.

use crate::polytope::{spectral_radius, Polytope};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinSysError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numeric failure: {0} (residual {1:.3e})")]
    NumericFailure(String, f64),
}

/// The plant `x+ = A x + B u + D w`.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self, LinSysError> {
        if !a.is_square() {
            return Err(LinSysError::InvalidInput("A must be square".into()));
        }
        if b.nrows() != a.nrows() || d.nrows() != a.nrows() {
            return Err(LinSysError::InvalidInput("B and D must have as many rows as A".into()));
        }
        for m in [&a, &b, &d] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(LinSysError::InvalidInput("non-finite system entry".into()));
            }
        }
        Ok(LinearSystem { a, b, d })
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }
    pub fn n_w(&self) -> usize {
        self.d.ncols()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.d * w
    }
}

/// Stacked maps from (x_k, input stack, disturbance stack) to the predicted
/// state stack `[x_1; ...; x_{N_h}]`.
#[derive(Debug, Clone)]
pub struct PredictionMatrices {
    pub l_x: DMatrix<f64>,
    pub l_u: DMatrix<f64>,
    pub l_w: DMatrix<f64>,
    pub n_h: usize,
    pub n_x: usize,
    pub n_u: usize,
    pub n_w: usize,
}

impl PredictionMatrices {
    /// Rows of the last block (the step-`N_h` state).
    pub fn last_block_u(&self) -> DMatrix<f64> {
        self.l_u.rows((self.n_h - 1) * self.n_x, self.n_x).into()
    }
    pub fn last_block_w(&self) -> DMatrix<f64> {
        self.l_w.rows((self.n_h - 1) * self.n_x, self.n_x).into()
    }
    pub fn last_block_x(&self) -> DMatrix<f64> {
        self.l_x.rows((self.n_h - 1) * self.n_x, self.n_x).into()
    }
}

pub fn build_prediction_matrices(
    sys: &LinearSystem,
    n_h: usize,
) -> Result<PredictionMatrices, LinSysError> {
    if n_h < 1 {
        return Err(LinSysError::InvalidInput("horizon must be at least 1".into()));
    }
    let (n_x, n_u, n_w) = (sys.n_x(), sys.n_u(), sys.n_w());
    let mut powers: Vec<DMatrix<f64>> = vec![DMatrix::identity(n_x, n_x)];
    for k in 0..n_h {
        let next = &sys.a * &powers[k];
        powers.push(next);
    }
    let mut l_x = DMatrix::zeros(n_x * n_h, n_x);
    let mut l_u = DMatrix::zeros(n_x * n_h, n_u * n_h);
    let mut l_w = DMatrix::zeros(n_x * n_h, n_w * n_h);
    for i in 1..=n_h {
        l_x.view_mut(((i - 1) * n_x, 0), (n_x, n_x)).copy_from(&powers[i]);
        for j in 1..=i {
            let ab = &powers[i - j] * &sys.b;
            l_u.view_mut(((i - 1) * n_x, (j - 1) * n_u), (n_x, n_u)).copy_from(&ab);
            let ad = &powers[i - j] * &sys.d;
            l_w.view_mut(((i - 1) * n_x, (j - 1) * n_w), (n_x, n_w)).copy_from(&ad);
        }
    }
    Ok(PredictionMatrices { l_x, l_u, l_w, n_h, n_x, n_u, n_w })
}

/// Number of free entries in a strictly lower-block-triangular gain.
pub fn policy_dim(n_h: usize, n_u: usize, n_w: usize) -> usize {
    n_u * n_w * n_h * (n_h - 1) / 2
}

/// Scalar position of gain entry `K_{block row j, block col i}[a, b]` in the
/// dense vector. Blocks are enumerated by block row, then block column, and
/// each block is flattened row-major.
fn v_index(n_u: usize, n_w: usize, j: usize, i: usize, a: usize, b: usize) -> usize {
    let block = j * (j - 1) / 2 + i;
    block * n_u * n_w + a * n_w + b
}

/// Flatten a strictly lower-block-triangular gain into its dense vector.
pub fn vectorize_policy(
    k: &DMatrix<f64>,
    n_h: usize,
    n_u: usize,
    n_w: usize,
) -> Result<DVector<f64>, LinSysError> {
    if k.nrows() != n_u * n_h || k.ncols() != n_w * n_h {
        return Err(LinSysError::InvalidInput("gain matrix has wrong shape".into()));
    }
    for j in 0..n_h {
        for i in j..n_h {
            let blk = k.view((j * n_u, i * n_w), (n_u, n_w));
            if blk.iter().any(|&v| v != 0.0) {
                return Err(LinSysError::InvalidInput(format!(
                    "block ({}, {}) must be zero for a strictly lower-block-triangular gain",
                    j, i
                )));
            }
        }
    }
    let mut v = DVector::zeros(policy_dim(n_h, n_u, n_w));
    for j in 1..n_h {
        for i in 0..j {
            for a in 0..n_u {
                for b in 0..n_w {
                    v[v_index(n_u, n_w, j, i, a, b)] = k[(j * n_u + a, i * n_w + b)];
                }
            }
        }
    }
    Ok(v)
}

/// Inverse of [`vectorize_policy`].
pub fn devectorize_policy(
    v: &DVector<f64>,
    n_h: usize,
    n_u: usize,
    n_w: usize,
) -> Result<DMatrix<f64>, LinSysError> {
    if v.len() != policy_dim(n_h, n_u, n_w) {
        return Err(LinSysError::InvalidInput(format!(
            "vector length {} does not match policy dimension {}",
            v.len(),
            policy_dim(n_h, n_u, n_w)
        )));
    }
    let mut k = DMatrix::zeros(n_u * n_h, n_w * n_h);
    for j in 1..n_h {
        for i in 0..j {
            for a in 0..n_u {
                for b in 0..n_w {
                    k[(j * n_u + a, i * n_w + b)] = v[v_index(n_u, n_w, j, i, a, b)];
                }
            }
        }
    }
    Ok(k)
}

/// Disturbance-affine policy `u = K w + c` with its dense vectorization.
#[derive(Debug, Clone)]
pub struct AffinePolicy {
    pub k: DMatrix<f64>,
    pub c: DVector<f64>,
    pub n_h: usize,
    pub n_u: usize,
    pub n_w: usize,
}

impl AffinePolicy {
    pub fn new(
        k: DMatrix<f64>,
        c: DVector<f64>,
        n_h: usize,
        n_u: usize,
        n_w: usize,
    ) -> Result<Self, LinSysError> {
        if c.len() != n_u * n_h {
            return Err(LinSysError::InvalidInput("feedforward length mismatch".into()));
        }
        // vectorize checks the triangular structure
        vectorize_policy(&k, n_h, n_u, n_w)?;
        Ok(AffinePolicy { k, c, n_h, n_u, n_w })
    }

    pub fn zero(n_h: usize, n_u: usize, n_w: usize) -> Self {
        AffinePolicy {
            k: DMatrix::zeros(n_u * n_h, n_w * n_h),
            c: DVector::zeros(n_u * n_h),
            n_h,
            n_u,
            n_w,
        }
    }

    pub fn from_vector(
        v: &DVector<f64>,
        c: DVector<f64>,
        n_h: usize,
        n_u: usize,
        n_w: usize,
    ) -> Result<Self, LinSysError> {
        let k = devectorize_policy(v, n_h, n_u, n_w)?;
        AffinePolicy::new(k, c, n_h, n_u, n_w)
    }

    pub fn v(&self) -> DVector<f64> {
        vectorize_policy(&self.k, self.n_h, self.n_u, self.n_w).expect("validated at construction")
    }

    /// Input stack for a given disturbance stack.
    pub fn inputs(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.k * w + &self.c
    }
}

/// Map a row functional on the input stack to its policy matrix `V`:
/// `v' V' w = rho' K(v) w` for every disturbance stack `w`.
pub fn policy_map_for_input_row(
    rho: &DVector<f64>,
    n_h: usize,
    n_u: usize,
    n_w: usize,
) -> DMatrix<f64> {
    assert_eq!(rho.len(), n_u * n_h, "row functional length mismatch");
    let mut v_mat = DMatrix::zeros(n_w * n_h, policy_dim(n_h, n_u, n_w));
    for j in 1..n_h {
        for i in 0..j {
            for a in 0..n_u {
                let coeff = rho[j * n_u + a];
                if coeff == 0.0 {
                    continue;
                }
                for b in 0..n_w {
                    v_mat[(i * n_w + b, v_index(n_u, n_w, j, i, a, b))] = coeff;
                }
            }
        }
    }
    v_mat
}

/// Linear map `v -> K(v) w` for a fixed disturbance stack `w`:
/// returns `S` with `K(v) w = S v`.
pub fn policy_action_on_disturbance(
    w: &DVector<f64>,
    n_h: usize,
    n_u: usize,
    n_w: usize,
) -> DMatrix<f64> {
    assert_eq!(w.len(), n_w * n_h, "disturbance stack length mismatch");
    let mut s = DMatrix::zeros(n_u * n_h, policy_dim(n_h, n_u, n_w));
    for j in 1..n_h {
        for i in 0..j {
            for a in 0..n_u {
                for b in 0..n_w {
                    s[(j * n_u + a, v_index(n_u, n_w, j, i, a, b))] = w[i * n_w + b];
                }
            }
        }
    }
    s
}

/// Policy maps for rows acting on the state stack: `V_j` for
/// `rho_j = (F_j L_u)'`.
pub fn build_policy_maps(pred: &PredictionMatrices, f_rows: &[DVector<f64>]) -> Vec<DMatrix<f64>> {
    f_rows
        .iter()
        .map(|f| {
            assert_eq!(f.len(), pred.l_u.nrows(), "stacked row length mismatch");
            let rho = (f.transpose() * &pred.l_u).transpose();
            policy_map_for_input_row(&rho, pred.n_h, pred.n_u, pred.n_w)
        })
        .collect()
}

/// Stage cost weights. `Q` must be symmetric PSD, `R` symmetric PD.
#[derive(Debug, Clone)]
pub struct CostSpec {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl CostSpec {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self, LinSysError> {
        let check = |m: &DMatrix<f64>, name: &str, floor: f64| -> Result<(), LinSysError> {
            if !m.is_square() {
                return Err(LinSysError::InvalidInput(format!("{} must be square", name)));
            }
            if (m - m.transpose()).amax() > 1e-12 {
                return Err(LinSysError::InvalidInput(format!("{} must be symmetric", name)));
            }
            let min_eig =
                m.clone().symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
            if min_eig < floor {
                return Err(LinSysError::InvalidInput(format!(
                    "{} eigenvalue {:.3e} below floor {:.1e}",
                    name, min_eig, floor
                )));
            }
            Ok(())
        };
        check(&q, "Q", -1e-12)?;
        check(&r, "R", 1e-9)?;
        Ok(CostSpec { q, r })
    }
}

/// Terminal gain, cost-to-go and terminal set.
#[derive(Debug, Clone)]
pub struct TerminalIngredients {
    pub k_f: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub x_f: Polytope,
}

#[derive(Debug, Clone)]
pub struct DareSolution {
    pub k_f: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Infinite-horizon discrete Riccati solve by fixed-point iteration of the
/// Riccati recursion (tolerance 1e-10 on the iterate step, capped at 10000
/// iterations). Returns the stabilizing gain for `u = K_f x`.
pub fn solve_dare(sys: &LinearSystem, cost: &CostSpec) -> Result<DareSolution, LinSysError> {
    let (a, b) = (&sys.a, &sys.b);
    if cost.q.nrows() != sys.n_x() || cost.r.nrows() != sys.n_u() {
        return Err(LinSysError::InvalidInput("cost dimensions do not match the system".into()));
    }
    let mut p = cost.q.clone();
    let mut iterations = 0;
    let max_iter = 10_000;
    loop {
        let btp = b.transpose() * &p;
        let gram = &cost.r + &btp * b;
        let gram_inv = gram.clone().try_inverse().ok_or_else(|| {
            LinSysError::NumericFailure("R + B'PB not invertible".into(), f64::NAN)
        })?;
        let next =
            &cost.q + a.transpose() * &p * a - a.transpose() * p.transpose() * b * &gram_inv * &btp * a;
        let next = (&next + next.transpose()) * 0.5;
        let delta = (&next - &p).norm();
        p = next;
        iterations += 1;
        if delta <= 1e-10 {
            break;
        }
        if iterations >= max_iter {
            return Err(LinSysError::NumericFailure(
                format!("Riccati iteration did not converge in {} steps", max_iter),
                delta,
            ));
        }
    }
    let gram = &cost.r + b.transpose() * &p * b;
    let gram_inv = gram
        .try_inverse()
        .ok_or_else(|| LinSysError::NumericFailure("R + B'PB not invertible".into(), f64::NAN))?;
    let k_f = -(&gram_inv * b.transpose() * &p * a);
    let residual = {
        let btp = b.transpose() * &p;
        let gram = &cost.r + &btp * b;
        let gram_inv = gram.try_inverse().unwrap();
        (&cost.q + a.transpose() * &p * a
            - a.transpose() * &p * b * gram_inv * &btp * a
            - &p)
            .norm()
    };
    if residual > 1e-8 {
        return Err(LinSysError::NumericFailure("Riccati residual too large".into(), residual));
    }
    Ok(DareSolution { k_f, p, residual, iterations })
}

/// Solve `A_cl' P A_cl - P = -Q_tilde` through the vectorized linear system
/// `(I - A_cl' (x) A_cl') vec(P) = vec(Q_tilde)`.
pub fn solve_lyapunov(
    a_cl: &DMatrix<f64>,
    q_tilde: &DMatrix<f64>,
) -> Result<DMatrix<f64>, LinSysError> {
    let n = a_cl.nrows();
    if !a_cl.is_square() || q_tilde.nrows() != n || q_tilde.ncols() != n {
        return Err(LinSysError::InvalidInput("Lyapunov dimensions mismatch".into()));
    }
    if spectral_radius(a_cl) >= 1.0 {
        return Err(LinSysError::InvalidInput("A_cl must be Schur stable".into()));
    }
    let at = a_cl.transpose();
    let kron = at.kronecker(&at);
    let sys = DMatrix::identity(n * n, n * n) - kron;
    let rhs = DVector::from_column_slice(q_tilde.as_slice());
    let sol = sys.lu().solve(&rhs).ok_or_else(|| {
        LinSysError::NumericFailure("Lyapunov linear system singular".into(), f64::NAN)
    })?;
    let p = DMatrix::from_column_slice(n, n, sol.as_slice());
    let p = (&p + p.transpose()) * 0.5;
    let residual = (a_cl.transpose() * &p * a_cl - &p + q_tilde).norm();
    if residual > 1e-9 {
        return Err(LinSysError::NumericFailure("Lyapunov residual too large".into(), residual));
    }
    Ok(p)
}

#[derive(Debug, Clone)]
pub struct SteadyState {
    pub x_s: DVector<f64>,
    pub u_s: DVector<f64>,
    /// norm of `(A - I) x_s + B u_s` (zero when an exact equilibrium exists)
    pub residual: f64,
    /// norm of `C_track x_s - reference`
    pub tracking_residual: f64,
}

/// Steady-state pair for a tracked reference: minimizes the equilibrium
/// residual `|| (A - I) x_s + B u_s ||` subject to the tracked outputs
/// matching the reference, both in the least-squares sense. Rank-deficient
/// problems are not an error; the residuals report the mismatch.
pub fn steady_state_target(
    sys: &LinearSystem,
    c_track: &DMatrix<f64>,
    reference: &DVector<f64>,
) -> Result<SteadyState, LinSysError> {
    let (n_x, n_u) = (sys.n_x(), sys.n_u());
    if c_track.ncols() != n_x || c_track.nrows() != reference.len() {
        return Err(LinSysError::InvalidInput("tracking selector dimensions mismatch".into()));
    }
    let n_z = n_x + n_u;
    let mut e = DMatrix::zeros(n_x, n_z);
    e.view_mut((0, 0), (n_x, n_x)).copy_from(&(&sys.a - DMatrix::identity(n_x, n_x)));
    e.view_mut((0, n_x), (n_x, n_u)).copy_from(&sys.b);
    let mut c = DMatrix::zeros(c_track.nrows(), n_z);
    c.view_mut((0, 0), (c_track.nrows(), n_x)).copy_from(c_track);

    // Equality-constrained least squares through the KKT system
    //     [E'E  C'] [z]   [0]
    //     [C    0 ] [l] = [r]
    // solved with an SVD pseudo-inverse so rank-deficient cases fall back to
    // the minimum-norm least-squares point instead of failing.
    let n_r = c.nrows();
    let mut kkt = DMatrix::zeros(n_z + n_r, n_z + n_r);
    kkt.view_mut((0, 0), (n_z, n_z)).copy_from(&(e.transpose() * &e));
    kkt.view_mut((0, n_z), (n_z, n_r)).copy_from(&c.transpose());
    kkt.view_mut((n_z, 0), (n_r, n_z)).copy_from(&c);
    let mut rhs = DVector::zeros(n_z + n_r);
    rhs.rows_mut(n_z, n_r).copy_from(reference);
    let sol_full = kkt
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| LinSysError::InvalidInput(e.into()))?;
    let sol = sol_full.rows(0, n_z).into_owned();
    let x_s = sol.rows(0, n_x).into_owned();
    let u_s = sol.rows(n_x, n_u).into_owned();
    let residual = (&e * &sol).norm();
    let tracking_residual = (c_track * &x_s - reference).norm();
    Ok(SteadyState { x_s, u_s, residual, tracking_residual })
}
