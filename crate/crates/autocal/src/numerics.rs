//! Small dense-matrix utilities shared by the calibrator, the controllers and
//! the safety checks: Cholesky factorization, a discrete-time algebraic
//! Riccati solver, finite-difference Jacobians, weighted norms and spectral
//! radius estimation.
//!
//! Everything here operates on `nalgebra` dynamic matrices; problem sizes are
//! tiny (n <= ~300), so simple iterative schemes are preferred over anything
//! clever.

use nalgebra::{DMatrix, DVector};
use std::fmt;

/// Relative asymmetry tolerated before a matrix is rejected as "not symmetric".
const SYMMETRY_TOL: f64 = 1e-9;

/// Fixed-point iteration cap for the Riccati solver.
const DARE_MAX_ITERS: usize = 10_000;

/// Residual at which the Riccati fixed point is declared converged.
const DARE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum NumericsError {
    /// A Cholesky pivot was non-positive: the matrix is not positive definite.
    NotPositiveDefinite,
    /// Input violated the symmetry precondition.
    NotSymmetric,
    /// Riccati iteration hit its cap without reaching the fixed point.
    NoConvergence,
    /// A function evaluation produced NaN or infinity.
    NonFiniteOutput,
    /// Operand shapes do not line up.
    DimensionMismatch,
}

impl fmt::Display for NumericsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericsError::NotPositiveDefinite => write!(f, "matrix is not positive definite"),
            NumericsError::NotSymmetric => write!(f, "matrix is not symmetric"),
            NumericsError::NoConvergence => write!(f, "iteration did not converge"),
            NumericsError::NonFiniteOutput => write!(f, "evaluation produced a non-finite value"),
            NumericsError::DimensionMismatch => write!(f, "dimension mismatch"),
        }
    }
}

impl std::error::Error for NumericsError {}

/// Replaces `m` by its symmetric part `(m + m^T) / 2`.
///
/// Covariance recursions drift off symmetry in floating point; every update
/// funnels through this before any factorization is attempted.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    let scale = 1.0_f64.max(max_abs(m));
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

/// Lower-triangular Cholesky factor `A` of a symmetric positive-definite `m`,
/// with `A * A^T = m`.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>, NumericsError> {
    if m.nrows() != m.ncols() {
        return Err(NumericsError::DimensionMismatch);
    }
    if !is_symmetric(m, SYMMETRY_TOL) {
        return Err(NumericsError::NotSymmetric);
    }
    nalgebra::Cholesky::new(m.clone())
        .map(|c| c.l())
        .ok_or(NumericsError::NotPositiveDefinite)
}

/// A discrete-time algebraic Riccati problem for dynamics `x' = A x + B u`
/// with stage cost `x^T Q x + u^T R u`.
#[derive(Debug, Clone)]
pub struct DareProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl DareProblem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self, NumericsError> {
        let n = a.nrows();
        let m = b.ncols();
        if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
            return Err(NumericsError::DimensionMismatch);
        }
        if !is_symmetric(&q, SYMMETRY_TOL) || !is_symmetric(&r, SYMMETRY_TOL) {
            return Err(NumericsError::NotSymmetric);
        }
        Ok(DareProblem { a, b, q, r })
    }
}

/// Solves the DARE by fixed-point iteration, returning the cost-to-go matrix
/// `P` and the gain `K = (R + B^T P B)^{-1} B^T P A`.
///
/// A stabilizing solution makes `A - B K` Schur stable; unstabilizable or
/// undetectable problems surface as `NoConvergence`.
pub fn dare_solve(p: &DareProblem) -> Result<(DMatrix<f64>, DMatrix<f64>), NumericsError> {
    let at = p.a.transpose();
    let bt = p.b.transpose();
    let mut sol = p.q.clone();
    let mut converged = false;
    for _ in 0..DARE_MAX_ITERS {
        let bpb = &p.r + &bt * &sol * &p.b;
        let gain_rhs = &bt * &sol * &p.a;
        let inner = nalgebra::Cholesky::new(bpb).ok_or(NumericsError::NotPositiveDefinite)?;
        let gain = inner.solve(&gain_rhs);
        let next = &p.q + &at * &sol * &p.a - &at * &sol * &p.b * &gain;
        let diff = max_abs(&(&next - &sol));
        sol = next;
        symmetrize(&mut sol);
        if !sol.iter().all(|v| v.is_finite()) || max_abs(&sol) > 1e14 {
            return Err(NumericsError::NoConvergence);
        }
        if diff <= DARE_TOL * (1.0 + max_abs(&sol)) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(NumericsError::NoConvergence);
    }
    let bpb = &p.r + &bt * &sol * &p.b;
    let inner = nalgebra::Cholesky::new(bpb).ok_or(NumericsError::NotPositiveDefinite)?;
    let gain = inner.solve(&(&bt * &sol * &p.a));
    Ok((sol, gain))
}

/// Jacobian of `g` at `x0` by central differences with step `eps`.
///
/// Entry `(i, j)` is `(g_i(x0 + eps e_j) - g_i(x0 - eps e_j)) / (2 eps)`.
pub fn finite_diff_jacobian<F>(
    mut g: F,
    x0: &DVector<f64>,
    eps: f64,
) -> Result<DMatrix<f64>, NumericsError>
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let n = x0.len();
    let mut columns: Vec<DVector<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut hi = x0.clone();
        let mut lo = x0.clone();
        hi[j] += eps;
        lo[j] -= eps;
        let ghi = g(&hi);
        let glo = g(&lo);
        if ghi.len() != glo.len() {
            return Err(NumericsError::DimensionMismatch);
        }
        let col = (ghi - glo) / (2.0 * eps);
        if !col.iter().all(|v| v.is_finite()) {
            return Err(NumericsError::NonFiniteOutput);
        }
        columns.push(col);
    }
    let rows = columns.first().map_or(0, |c| c.len());
    let mut jac = DMatrix::zeros(rows, n);
    for (j, col) in columns.iter().enumerate() {
        if col.len() != rows {
            return Err(NumericsError::DimensionMismatch);
        }
        jac.set_column(j, col);
    }
    Ok(jac)
}

/// Quadratic form `v^T sigma v`.
pub fn weighted_sq_norm(v: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64, NumericsError> {
    if sigma.nrows() != v.len() || sigma.ncols() != v.len() {
        return Err(NumericsError::DimensionMismatch);
    }
    Ok((v.transpose() * sigma * v)[(0, 0)])
}

/// Spectral radius of a square matrix, estimated by normalized power
/// iteration with a geometric mean of the growth factors.
///
/// Complex dominant pairs make the per-step growth oscillate, so the estimate
/// averages over the tail of the run instead of trusting the last step.
pub fn spectral_radius(a: &DMatrix<f64>, iters: usize) -> f64 {
    assert_eq!(a.nrows(), a.ncols(), "spectral radius needs a square matrix");
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    // A deliberately unstructured start vector so no eigenvector is missed.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.37 * (i as f64 + 1.0).sin());
    v /= v.norm();
    let mut log_sum = 0.0;
    let mut counted = 0usize;
    let warmup = iters / 2;
    for k in 0..iters {
        let w = a * &v;
        let growth = w.norm();
        if growth == 0.0 || !growth.is_finite() {
            // Nilpotent direction or overflow: restart conventions.
            return if growth == 0.0 { 0.0 } else { f64::INFINITY };
        }
        v = w / growth;
        if k >= warmup {
            log_sum += growth.ln();
            counted += 1;
        }
    }
    if counted == 0 {
        0.0
    } else {
        (log_sum / counted as f64).exp()
    }
}

/// Solves the discrete Lyapunov equation `A^T M A - M = -Q` for stable `A`
/// by doubling the matrix power series `M = sum_k (A^T)^k Q A^k`.
///
/// Returns `NoConvergence` when the series diverges, i.e. when `A` is not
/// Schur stable.
pub fn discrete_lyapunov(
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> Result<DMatrix<f64>, NumericsError> {
    let n = a.nrows();
    if a.ncols() != n || q.shape() != (n, n) {
        return Err(NumericsError::DimensionMismatch);
    }
    let mut m = q.clone();
    let mut s = a.clone();
    for _ in 0..64 {
        let inc = s.transpose() * &m * &s;
        let inc_size = max_abs(&inc);
        m += inc;
        if !m.iter().all(|v| v.is_finite()) || max_abs(&m) > 1e12 {
            return Err(NumericsError::NoConvergence);
        }
        if inc_size <= 1e-14 * (1.0 + max_abs(&m)) {
            symmetrize(&mut m);
            // The series may truncate early for nilpotent-ish A; still verify.
            let residual = max_abs(&(a.transpose() * &m * a - &m + q));
            if residual <= 1e-10 * (1.0 + max_abs(&m)) {
                return Ok(m);
            }
            return Err(NumericsError::NoConvergence);
        }
        s = &s * &s;
    }
    Err(NumericsError::NoConvergence)
}
