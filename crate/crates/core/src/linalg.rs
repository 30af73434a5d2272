//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
    #[error("matrix is not symmetric (entry ({0},{1}) differs from its transpose)")]
    NotSymmetric(usize, usize),
    #[error("matrix is not positive semidefinite (pivot {pivot} = {value:e})")]
    NotPsd { pivot: usize, value: f64 },
    #[error("diagonal entry {0} is {1}, expected 1")]
    NonUnitDiagonal(usize, f64),
    #[error("entry ({0},{1}) = {2} lies outside [-1, 1]")]
    OutOfRange(usize, usize, f64),
    #[error("entry is not finite")]
    NonFinite,
}

/// Cholesky factor `L` (lower triangular, nonnegative diagonal) of a
/// positive semidefinite matrix. Zero pivots are allowed as long as the rest
/// of the column is consistent with them, which covers perfectly correlated
/// copulas.
pub fn psd_cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(LinalgError::NotSquare(a.nrows(), a.ncols()));
    }
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0_f64, f64::max).max(1.0);
    let tol = 1e-12 * scale;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -tol {
            return Err(LinalgError::NotPsd { pivot: j, value: d });
        }
        if d <= tol {
            // Singular direction: remaining column entries must vanish.
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if s.abs() > 1e-9 * scale {
                    return Err(LinalgError::NotPsd { pivot: j, value: d });
                }
            }
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

pub fn check_symmetric(a: &DMatrix<f64>, tol: f64) -> Result<(), LinalgError> {
    if a.nrows() != a.ncols() {
        return Err(LinalgError::NotSquare(a.nrows(), a.ncols()));
    }
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            if !a[(i, j)].is_finite() {
                return Err(LinalgError::NonFinite);
            }
            if j > i && (a[(i, j)] - a[(j, i)]).abs() > tol {
                return Err(LinalgError::NotSymmetric(i, j));
            }
        }
    }
    Ok(())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(a.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Checks the correlation-matrix invariants: symmetric, unit diagonal,
/// entries in [-1, 1], positive semidefinite.
pub fn validate_correlation(r: &DMatrix<f64>) -> Result<(), LinalgError> {
    check_symmetric(r, 1e-12)?;
    for i in 0..r.nrows() {
        if (r[(i, i)] - 1.0).abs() > 1e-12 {
            return Err(LinalgError::NonUnitDiagonal(i, r[(i, i)]));
        }
        for j in 0..r.ncols() {
            if r[(i, j)].abs() > 1.0 + 1e-12 {
                return Err(LinalgError::OutOfRange(i, j, r[(i, j)]));
            }
        }
    }
    psd_cholesky(r).map(|_| ())
}

/// Euclidean (Frobenius) projection of a symmetric matrix onto the PSD cone.
pub fn project_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let mut lam = eig.eigenvalues.clone();
    for v in lam.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let q = &eig.eigenvectors;
    let mut out = q * DMatrix::from_diagonal(&lam) * q.transpose();
    // Re-symmetrize against rounding.
    let t = out.transpose();
    out += t;
    out *= 0.5;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reproduces_matrix() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0]);
        let l = psd_cholesky(&a).unwrap();
        assert!((&l * l.transpose() - &a).abs().max() < 1e-12);
        assert!(l[(0, 1)] == 0.0 && l[(0, 0)] > 0.0);
    }

    #[test]
    fn cholesky_accepts_singular_psd() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let l = psd_cholesky(&a).unwrap();
        assert_eq!(l[(1, 0)], 1.0);
        assert_eq!(l[(1, 1)], 0.0);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert!(psd_cholesky(&b).is_ok());
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.2, 1.2, 1.0]);
        assert!(matches!(psd_cholesky(&a), Err(LinalgError::NotPsd { .. })));
        assert!((min_eigenvalue(&a) + 0.2).abs() < 1e-12);
    }

    #[test]
    fn correlation_checks() {
        let ok = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]);
        assert!(validate_correlation(&ok).is_ok());
        let diag = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert!(matches!(validate_correlation(&diag), Err(LinalgError::NonUnitDiagonal(0, _))));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.2, 1.0]);
        assert!(matches!(validate_correlation(&asym), Err(LinalgError::NotSymmetric(0, 1))));
        let big = DMatrix::from_row_slice(2, 2, &[1.0, 1.5, 1.5, 1.0]);
        assert!(matches!(validate_correlation(&big), Err(LinalgError::OutOfRange(..))));
    }

    #[test]
    fn psd_projection_clips_negative_part() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.2, 1.2, 1.0]);
        let p = project_psd(&a);
        assert!(min_eigenvalue(&p) > -1e-12);
        // eigenvalues 2.2 and -0.2 -> keep 2.2 along (1,1)/sqrt2
        assert!((p[(0, 0)] - 1.1).abs() < 1e-12 && (p[(0, 1)] - 1.1).abs() < 1e-12);
    }
}
