//! Small dense helpers shared by the estimator and the variance code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest condition number accepted for the information matrix.
pub const MAX_CONDITION: f64 = 1e12;

/// 2-norm condition estimate of a symmetric matrix from its eigenvalues.
pub fn symmetric_condition(a: &DMatrix<f64>) -> f64 {
    let eig = a.clone().symmetric_eigenvalues();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for &l in eig.iter() {
        let l = l.abs();
        lo = lo.min(l);
        hi = hi.max(l);
    }
    if !hi.is_finite() || lo.is_nan() {
        return f64::INFINITY;
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Fails with [`Error::Singular`] when `a` is too ill-conditioned to invert.
pub fn check_conditioned(a: &DMatrix<f64>) -> Result<()> {
    let condition = symmetric_condition(a);
    if condition.is_finite() && condition <= MAX_CONDITION {
        Ok(())
    } else {
        Err(Error::Singular { condition })
    }
}

/// Solves `a x = b` for symmetric `a`.
///
/// Uses a Cholesky factorization when `a` is positive definite and falls back to
/// LU otherwise (privatized summaries can make the information matrix indefinite).
pub fn solve_symmetric(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    check_conditioned(a)?;
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or(Error::Singular { condition: f64::INFINITY })
}

/// Inverse of a symmetric matrix, symmetrized on return.
pub fn inverse_symmetric(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_conditioned(a)?;
    let inv = match a.clone().cholesky() {
        Some(chol) => chol.inverse(),
        None => a
            .clone()
            .try_inverse()
            .ok_or(Error::Singular { condition: f64::INFINITY })?,
    };
    Ok(symmetrize(&inv))
}

/// `(a + aᵀ) / 2`, which is bitwise symmetric.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = a.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Log-determinant of a symmetric positive-definite matrix.
pub fn logdet_spd(a: &DMatrix<f64>) -> Result<f64> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or(Error::Singular { condition: symmetric_condition(a) })?;
    Ok(chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum())
}
