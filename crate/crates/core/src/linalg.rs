//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{CalibError, Result};

/// Full QR of an m×p matrix (m >= p): returns (Q1, Q2, R) with
/// Q1: m×p spanning col(A), Q2: m×(m-p) spanning its orthogonal complement,
/// and R: p×p upper triangular so that A = Q1 R.
pub fn full_qr(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (m, p) = a.shape();
    assert!(m >= p, "full_qr expects a tall matrix, got {m}x{p}");
    let qr = a.clone().qr();
    let r = qr.r();
    // Apply the stored reflectors to the identity to materialize Q^T.
    let mut qt = DMatrix::<f64>::identity(m, m);
    qr.q_tr_mul(&mut qt);
    let q = qt.transpose();
    let q1 = q.columns(0, p).into_owned();
    let q2 = q.columns(p, m - p).into_owned();
    (q1, q2, r)
}

/// Solve A X = B by LU with a singularity check.
pub fn lu_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| CalibError::Numeric(format!("singular system in {context}")))
}

pub fn lu_solve_vec(a: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| CalibError::Numeric(format!("singular system in {context}")))
}

/// Solve a symmetric positive definite system by Cholesky, retrying once with
/// a relative jitter on the diagonal before giving up.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    let scale = a.diagonal().mean().abs().max(f64::MIN_POSITIVE);
    let jittered = a + DMatrix::identity(a.nrows(), a.ncols()) * (1e-10 * scale);
    jittered
        .cholesky()
        .map(|c| c.solve(b))
        .ok_or_else(|| CalibError::Numeric(format!("indefinite system in {context}")))
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}
