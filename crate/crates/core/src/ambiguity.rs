//! Empirical disturbance models: the sample-based ambiguity ball, empirical
//! CVaR, worst-case expectations over the ball (dual LP route) and a
//! brute-force transport LP used as an independent oracle in tests and
//! acceptance runs. Only the order-1 ball with the L1 ground metric is
//! implemented; that is the setting the constraint reformulation needs.

use crate::polytope::{Polytope, PolytopeError};
use crate::solver::{self, QpProblem, SolverSettings, SparseMat, Status};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AmbiguityError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("worst-case expectation unbounded (support unbounded in a growth direction)")]
    Unbounded,
    #[error("transport oracle supports at most 2 dimensions, got {0}")]
    UnsupportedDimension(usize),
    #[error("io error reading {path}: {err}")]
    Io { path: String, err: String },
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error(transparent)]
    Solver(#[from] solver::SolverError),
}

/// Samples, radius, violation level and support of the ambiguity ball over
/// the stacked disturbance space.
#[derive(Debug, Clone)]
pub struct AmbiguitySpec {
    pub samples: Vec<DVector<f64>>,
    pub epsilon: f64,
    pub alpha: f64,
    pub support: Polytope,
}

impl AmbiguitySpec {
    pub fn new(
        samples: Vec<DVector<f64>>,
        epsilon: f64,
        alpha: f64,
        support: Polytope,
    ) -> Result<Self, AmbiguityError> {
        if samples.is_empty() {
            return Err(AmbiguityError::InvalidInput("need at least one sample".into()));
        }
        if !(epsilon >= 0.0) {
            return Err(AmbiguityError::InvalidInput("epsilon must be nonnegative".into()));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(AmbiguityError::InvalidInput("alpha must lie in (0, 1)".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.len() != support.dim() {
                return Err(AmbiguityError::InvalidInput(format!(
                    "sample {} has dimension {} but the support has {}",
                    i,
                    s.len(),
                    support.dim()
                )));
            }
            if !support.contains(s, 1e-9) {
                return Err(AmbiguityError::InvalidInput(format!(
                    "sample {} lies outside the support",
                    i
                )));
            }
        }
        Ok(AmbiguitySpec { samples, epsilon, alpha, support })
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn dim(&self) -> usize {
        self.support.dim()
    }

    /// New spec over a contiguous step range of each sample trajectory
    /// (`n_w` entries per step), with the given support.
    pub fn slice_steps(
        &self,
        n_w: usize,
        from_step: usize,
        n_steps: usize,
        support: Polytope,
    ) -> Result<AmbiguitySpec, AmbiguityError> {
        let samples = self
            .samples
            .iter()
            .map(|s| s.rows(from_step * n_w, n_steps * n_w).into_owned())
            .collect();
        AmbiguitySpec::new(samples, self.epsilon, self.alpha, support)
    }
}

/// Empirical CVaR at level `alpha`: `inf_t [ mean((loss + t)_+)/alpha - t ]`.
/// For a discrete sample the infimum is attained at a negated order
/// statistic, so the scan over those candidates is exact.
pub fn empirical_cvar(losses: &[f64], alpha: f64) -> f64 {
    assert!(!losses.is_empty(), "empirical_cvar needs at least one loss");
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
    let n = losses.len() as f64;
    let mut best = f64::INFINITY;
    for &cand in losses {
        let t = -cand;
        let mean_pos: f64 = losses.iter().map(|&l| (l + t).max(0.0)).sum::<f64>() / n;
        best = best.min(mean_pos / alpha - t);
    }
    best
}

/// One affine piece `a' w + b` of a piecewise-affine function `max_r (...)`.
#[derive(Debug, Clone)]
pub struct AffinePiece {
    pub a: DVector<f64>,
    pub b: f64,
}

/// Worst-case expectation of `h(w) = max_r (a_r' w + b_r)` over the ball,
/// through the dual program
/// `inf_{lambda >= 0} lambda eps + mean_i sup_w [h(w) - lambda |w - w_i|_1]`
/// with each inner supremum dualized over the support polytope. Exact for
/// compact polytopic support (strong duality), which is why the result
/// doubles as the reference value for the transport oracle.
pub fn dual_worstcase_value(
    pieces: &[AffinePiece],
    spec: &AmbiguitySpec,
) -> Result<f64, AmbiguityError> {
    if pieces.is_empty() {
        return Err(AmbiguityError::InvalidInput("need at least one affine piece".into()));
    }
    let d = spec.dim();
    for p in pieces {
        if p.a.len() != d {
            return Err(AmbiguityError::InvalidInput("piece dimension mismatch".into()));
        }
    }
    let n = spec.n_samples();
    let r = pieces.len();
    let rows_m = spec.support.n_rows();

    // variables: lambda | s_0..s_{N-1} | n_{ir} stacked (i outer, r inner)
    let n_vars = 1 + n + n * r * rows_m;
    let idx_lambda = 0;
    let idx_s = |i: usize| 1 + i;
    let idx_n = |i: usize, rr: usize, row: usize| 1 + n + (i * r + rr) * rows_m + row;

    let mut p = QpProblem::new(n_vars);
    p.fq[idx_lambda] = spec.epsilon;
    for i in 0..n {
        p.fq[idx_s(i)] = 1.0 / n as f64;
    }
    p.lb[idx_lambda] = 0.0;
    for i in 0..n {
        for rr in 0..r {
            for row in 0..rows_m {
                p.lb[idx_n(i, rr, row)] = 0.0;
            }
        }
    }

    let n_rows_total = n * r * (1 + 2 * d);
    p.a_ineq = SparseMat::zeros(n_rows_total, n_vars);
    p.b_ineq = vec![0.0; n_rows_total];
    let mut row_id = 0;
    for (i, w_hat) in spec.samples.iter().enumerate() {
        let m_w = &spec.support.m * w_hat; // M w_i
        for (rr, piece) in pieces.iter().enumerate() {
            // epigraph: (m - M w_i)' n_ir - s_i <= -(a_r' w_i + b_r)
            for row in 0..rows_m {
                p.a_ineq.push(row_id, idx_n(i, rr, row), spec.support.b[row] - m_w[row]);
            }
            p.a_ineq.push(row_id, idx_s(i), -1.0);
            p.b_ineq[row_id] = -(piece.a.dot(w_hat) + piece.b);
            row_id += 1;
            // dual-norm box: |a_r - M' n_ir|_inf <= lambda, two-sided
            for c in 0..d {
                for row in 0..rows_m {
                    let mv = spec.support.m[(row, c)];
                    if mv != 0.0 {
                        p.a_ineq.push(row_id, idx_n(i, rr, row), -mv);
                        p.a_ineq.push(row_id + 1, idx_n(i, rr, row), mv);
                    }
                }
                p.a_ineq.push(row_id, idx_lambda, -1.0);
                p.b_ineq[row_id] = -piece.a[c];
                p.a_ineq.push(row_id + 1, idx_lambda, -1.0);
                p.b_ineq[row_id + 1] = piece.a[c];
                row_id += 2;
            }
        }
    }
    debug_assert_eq!(row_id, n_rows_total);

    let sol = solver::solve_lp(&p, &SolverSettings::default())?;
    match sol.status {
        Status::Optimal => Ok(sol.objective),
        Status::Infeasible => Err(AmbiguityError::Unbounded),
        other => Err(AmbiguityError::InvalidInput(format!(
            "dual worst-case LP ended with status {:?}",
            other
        ))),
    }
}

/// Brute-force primal transport LP on a grid over the support (test oracle,
/// dimensions 1 and 2 only). Samples are snapped to their nearest grid
/// point; the returned value converges to the dual one as the grid refines.
pub fn transport_lp_oracle<F>(
    h: F,
    spec: &AmbiguitySpec,
    grid_resolution: usize,
) -> Result<f64, AmbiguityError>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let d = spec.dim();
    if d > 2 {
        return Err(AmbiguityError::UnsupportedDimension(d));
    }
    if grid_resolution < 50 {
        return Err(AmbiguityError::InvalidInput("grid resolution must be at least 50".into()));
    }
    let (lo, hi) = spec.support.bounding_box()?;
    let lin = |a: f64, b: f64, k: usize| a + (b - a) * k as f64 / (grid_resolution - 1) as f64;
    let mut grid: Vec<DVector<f64>> = Vec::new();
    match d {
        1 => {
            for k in 0..grid_resolution {
                let z = DVector::from_vec(vec![lin(lo[0], hi[0], k)]);
                if spec.support.contains(&z, 1e-9) {
                    grid.push(z);
                }
            }
        }
        2 => {
            for k0 in 0..grid_resolution {
                for k1 in 0..grid_resolution {
                    let z = DVector::from_vec(vec![lin(lo[0], hi[0], k0), lin(lo[1], hi[1], k1)]);
                    if spec.support.contains(&z, 1e-9) {
                        grid.push(z);
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    if grid.is_empty() {
        return Err(AmbiguityError::InvalidInput("no grid point inside the support".into()));
    }

    let l1 = |a: &DVector<f64>, b: &DVector<f64>| (a - b).abs().sum();
    let snapped: Vec<usize> = spec
        .samples
        .iter()
        .map(|s| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (g, z) in grid.iter().enumerate() {
                let dist = l1(s, z);
                if dist < best_d {
                    best_d = dist;
                    best = g;
                }
            }
            best
        })
        .collect();

    // variables: coupling gamma_{g,i} >= 0
    let n = spec.n_samples();
    let g_count = grid.len();
    let n_vars = g_count * n;
    let idx = |g: usize, i: usize| g * n + i;
    let mut p = QpProblem::new(n_vars);
    for g in 0..g_count {
        let hz = h(&grid[g]);
        for i in 0..n {
            p.fq[idx(g, i)] = -hz; // maximize
            p.lb[idx(g, i)] = 0.0;
        }
    }
    // marginal to the empirical distribution
    p.a_eq = SparseMat::zeros(n, n_vars);
    p.b_eq = vec![1.0 / n as f64; n];
    for i in 0..n {
        for g in 0..g_count {
            p.a_eq.push(i, idx(g, i), 1.0);
        }
    }
    // transport budget
    p.a_ineq = SparseMat::zeros(1, n_vars);
    for g in 0..g_count {
        for i in 0..n {
            p.a_ineq.push(0, idx(g, i), l1(&grid[g], &grid[snapped[i]]));
        }
    }
    p.b_ineq = vec![spec.epsilon];

    let sol = solver::solve_lp(&p, &SolverSettings::default())?;
    match sol.status {
        Status::Optimal => Ok(-sol.objective),
        other => Err(AmbiguityError::InvalidInput(format!(
            "transport LP ended with status {:?}",
            other
        ))),
    }
}

/// Principal-axis bounding box of raw disturbance samples: center the data,
/// take the eigenvectors of the sample covariance as axes, bound the data in
/// those coordinates and inflate each half-width by the relative `margin`.
/// A zero-variance axis gets half-width `margin * (largest axis width)`.
pub fn identify_support(
    raw_samples: &[DVector<f64>],
    margin: f64,
) -> Result<Polytope, AmbiguityError> {
    if raw_samples.is_empty() {
        return Err(AmbiguityError::InvalidInput("no samples".into()));
    }
    let d = raw_samples[0].len();
    if raw_samples.len() < d + 1 {
        return Err(AmbiguityError::InvalidInput(format!(
            "need at least {} samples for a {}-dimensional support",
            d + 1,
            d
        )));
    }
    if margin < 0.0 {
        return Err(AmbiguityError::InvalidInput("margin must be nonnegative".into()));
    }
    if raw_samples.iter().any(|s| s.len() != d) {
        return Err(AmbiguityError::InvalidInput("inconsistent sample dimensions".into()));
    }
    let n = raw_samples.len() as f64;
    let mean = raw_samples.iter().fold(DVector::zeros(d), |acc, s| acc + s) / n;
    let mut cov = DMatrix::zeros(d, d);
    for s in raw_samples {
        let c = s - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1.0).max(1.0);
    let eig = cov.symmetric_eigen();

    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for s in raw_samples {
        let y = eig.eigenvectors.transpose() * (s - &mean);
        for c in 0..d {
            lo[c] = lo[c].min(y[c]);
            hi[c] = hi[c].max(y[c]);
        }
    }
    let widest = (0..d).map(|c| hi[c] - lo[c]).fold(0.0, f64::max);
    let mut m = DMatrix::zeros(2 * d, d);
    let mut b = DVector::zeros(2 * d);
    for c in 0..d {
        let mid = 0.5 * (lo[c] + hi[c]);
        let mut half = 0.5 * (hi[c] - lo[c]);
        if half <= 1e-12 * widest.max(1.0) {
            half = margin * widest;
        } else {
            half *= 1.0 + margin;
        }
        let axis = eig.eigenvectors.column(c).into_owned();
        let off = axis.dot(&mean);
        m.row_mut(2 * c).copy_from(&axis.transpose());
        b[2 * c] = off + mid + half;
        m.row_mut(2 * c + 1).copy_from(&(-&axis).transpose());
        b[2 * c + 1] = -(off + mid - half);
    }
    Ok(Polytope::new(m, b)?)
}

/// Layout of a disturbance-sample file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleLayout {
    /// one trajectory per row, `n_w * n_h` columns
    Trajectory,
    /// `n_w` columns, `n_h` consecutive rows per trajectory
    PerStep,
}

/// Read disturbance trajectories from a CSV file (optional header line).
pub fn load_trajectories(
    path: &str,
    layout: SampleLayout,
    n_w: usize,
    n_h: usize,
) -> Result<Vec<DVector<f64>>, AmbiguityError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AmbiguityError::Io { path: path.into(), err: e.to_string() })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: Result<Vec<f64>, _> = line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        match parsed {
            Ok(vals) => rows.push(vals),
            Err(_) if lineno == 0 => continue, // header
            Err(e) => {
                return Err(AmbiguityError::Io {
                    path: path.into(),
                    err: format!("line {}: {}", lineno + 1, e),
                })
            }
        }
    }
    match layout {
        SampleLayout::Trajectory => rows
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                if r.len() != n_w * n_h {
                    Err(AmbiguityError::InvalidInput(format!(
                        "trajectory row {} has {} values, expected {}",
                        i + 1,
                        r.len(),
                        n_w * n_h
                    )))
                } else {
                    Ok(DVector::from_vec(r))
                }
            })
            .collect(),
        SampleLayout::PerStep => {
            if rows.iter().any(|r| r.len() != n_w) {
                return Err(AmbiguityError::InvalidInput(format!(
                    "per-step rows must have {} values",
                    n_w
                )));
            }
            if rows.len() % n_h != 0 {
                return Err(AmbiguityError::InvalidInput(format!(
                    "per-step file has {} rows, not a multiple of the horizon {}",
                    rows.len(),
                    n_h
                )));
            }
            Ok(rows
                .chunks(n_h)
                .map(|chunk| {
                    DVector::from_vec(chunk.iter().flat_map(|r| r.iter().copied()).collect())
                })
                .collect())
        }
    }
}
