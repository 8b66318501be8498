//! Small dense helpers on top of nalgebra.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn is_diagonal(m: &DMatrix<f64>) -> bool {
    m.is_square()
        && (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
}

/// `B S⁻¹` for a symmetric positive definite `S`, via Cholesky (1×1 by division).
pub fn solve_spd_right(b: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if s.nrows() == 1 {
        let d = s[(0, 0)];
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::numerical(format!(
                "gain denominator is not positive definite (value {d})"
            )));
        }
        return Ok(b / d);
    }
    let chol = s.clone().cholesky().ok_or_else(|| {
        Error::numerical("gain denominator is not positive definite (Cholesky failed)")
    })?;
    // X S = B  <=>  S Xᵀ = Bᵀ
    Ok(chol.solve(&b.transpose()).transpose())
}

/// Symmetric square root of a positive semi-definite matrix. Diagonal input is
/// rooted elementwise; otherwise by symmetric eigendecomposition with tiny
/// negative eigenvalues clamped to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::InvalidArgument("square root of a non-square matrix".into()));
    }
    if is_diagonal(m) {
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            let d = m[(i, i)];
            if d < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "covariance has negative diagonal entry {d}"
                )));
            }
            out[(i, i)] = d.sqrt();
        }
        return Ok(out);
    }
    let eig = m.clone().symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -1e-12 * scale {
            return Err(Error::InvalidArgument(format!(
                "covariance is not positive semi-definite (eigenvalue {v})"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}
