//! Shared probability and linear-algebra primitives.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Shift-stable log-sum-exp: `ln Σ exp(v_j)`.
///
/// The maximum is subtracted before exponentiation so inputs like
/// `[1000, 1000]` do not overflow.
pub fn lse(v: &DVector<f64>) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::InvalidArgument("lse of empty vector".into()));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(Error::InvalidArgument("lse of vector with NaN entry".into()));
    }
    Ok(lse_slice(v.as_slice()))
}

/// `lse` on a raw slice, assuming the input is already validated.
pub(crate) fn lse_slice(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = v.iter().map(|x| (x - m).exp()).sum();
    m + sum.ln()
}

/// Softmax `σ_i(v) = exp(v_i − lse(v))`; output lies on the open simplex.
pub fn softmax(v: &DVector<f64>) -> Result<DVector<f64>> {
    let l = lse(v)?;
    Ok(DVector::from_iterator(v.len(), v.iter().map(|x| (x - l).exp())))
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let l = lse_slice(v);
    for x in v.iter_mut() {
        *x = (*x - l).exp();
    }
}

/// Gaussian log-density `ln N(u; mean, sigma)` via Cholesky factorization.
pub fn gauss_logpdf(u: &DVector<f64>, mean: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let chol = cholesky(sigma, "gaussian covariance")?;
    Ok(gauss_logpdf_chol(u, mean, &chol))
}

/// Gaussian log-density with a precomputed covariance factorization.
pub(crate) fn gauss_logpdf_chol(
    u: &DVector<f64>,
    mean: &DVector<f64>,
    chol: &Cholesky<f64, Dyn>,
) -> f64 {
    let n = u.len() as f64;
    let diff = u - mean;
    // Solve L y = diff; the quadratic form is |y|^2.
    let y = chol.l_dirty().solve_lower_triangular(&diff).expect("chol L is invertible");
    let quad = y.norm_squared();
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (quad + n * LN_2PI + logdet)
}

pub(crate) const LN_2PI: f64 = 1.8378770664093453;

/// Cholesky factorization with a domain error identifying the offending matrix.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidArgument(format!(
            "{what}: expected square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite { what: what.into() })
}

/// `ln det` of a symmetric positive definite matrix.
pub fn logdet_spd(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let chol = cholesky(m, what)?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let sym = 0.5 * (m + m.transpose());
    let mut ev: Vec<f64> = sym.symmetric_eigenvalues().iter().cloned().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig_sym(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m)[0]
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eig_sym(m: &DMatrix<f64>) -> f64 {
    *symmetric_eigenvalues(m).last().unwrap()
}

/// Spectral radius of a (generally nonsymmetric) square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Spectral norm `‖m‖₂ = sqrt(λ_max(mᵀm))`.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    let gram = m.transpose() * m;
    max_eig_sym(&gram).max(0.0).sqrt()
}

/// Wrap an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}
