//! Small dense linear algebra: SVD pseudo-inverse and a semidefinite-tolerant
//! Cholesky factorisation.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative singular-value cutoff used to detect rank deficiency.
pub const PINV_RCOND: f64 = 1e-10;

/// Moore-Penrose pseudo-inverse of an `n x d` matrix with full column rank.
///
/// Returns the `d x n` matrix `P` with `P * a = I_d`.
pub fn pinv_full_column_rank(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, d) = a.shape();
    if n < d {
        return Err(Error::InvalidModel(format!(
            "volatility matrix is {n}x{d}; need at least as many assets as Brownian motions"
        )));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(smax > 0.0) || smin <= PINV_RCOND * smax {
        return Err(Error::InvalidModel(format!(
            "volatility matrix is rank deficient (singular values in [{smin:.3e}, {smax:.3e}])"
        )));
    }
    svd.pseudo_inverse(PINV_RCOND * smax)
        .map_err(|e| Error::InvalidModel(format!("pseudo-inverse failed: {e}")))
}

/// Lower-triangular `L` with `L L^T = r` for a symmetric positive
/// semidefinite `r`. Zero pivots are allowed when the corresponding column is
/// already resolved; a genuinely negative direction is rejected.
pub fn cholesky_psd(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = r.nrows();
    if r.ncols() != n {
        return Err(Error::InvalidModel("correlation matrix is not square".into()));
    }
    for i in 0..n {
        for j in 0..i {
            if (r[(i, j)] - r[(j, i)]).abs() > 1e-12 {
                return Err(Error::InvalidModel("correlation matrix is not symmetric".into()));
            }
        }
    }
    let tol = 1e-12 * (1.0 + r.diagonal().iter().cloned().fold(0.0, f64::max));
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = r[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -tol {
            return Err(Error::InvalidModel(format!(
                "correlation matrix is not positive semidefinite (pivot {j} = {d:.3e})"
            )));
        }
        let ljj = d.max(0.0).sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = r[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if ljj > tol.sqrt() {
                l[(i, j)] = s / ljj;
            } else if s.abs() > 1e-9 {
                return Err(Error::InvalidModel(format!(
                    "correlation matrix is not positive semidefinite (degenerate pivot {j})"
                )));
            }
        }
    }
    Ok(l)
}
