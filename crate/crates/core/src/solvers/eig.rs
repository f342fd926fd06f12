use super::SolverError;
use crate::channel::C64;
use nalgebra::{DMatrix, DVector};

fn hermitian_part(h: &DMatrix<C64>) -> DMatrix<C64> {
    (h + h.adjoint()) * C64::new(0.5, 0.0)
}

/// Largest eigenvalue of a Hermitian matrix and a unit eigenvector.
pub fn lambda_max(h: &DMatrix<C64>) -> (f64, DVector<C64>) {
    assert!(h.is_square() && h.nrows() > 0, "lambda_max needs a nonempty square matrix");
    let eig = hermitian_part(h).symmetric_eigen();
    let (idx, val) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
    let v = eig.eigenvectors.column(idx).into_owned();
    let n = v.norm();
    (val, v.unscale(n))
}

/// Maximize `v^H A v / v^H B v` for Hermitian PSD `A` and Hermitian PD `B`.
pub fn max_generalized_eig(a: &DMatrix<C64>, b: &DMatrix<C64>) -> Result<(f64, DVector<C64>), SolverError> {
    if a.shape() != b.shape() || !a.is_square() {
        return Err(SolverError::Dimension("generalized eigenproblem needs equal square matrices".into()));
    }
    let b = hermitian_part(b);
    let scale = (0..b.nrows()).map(|i| b[(i, i)].re).fold(0.0, f64::max);
    let chol = b.cholesky().ok_or(SolverError::Singular)?;
    let l = chol.l();
    // Pivots below ~sqrt(eps) relative to the diagonal mean rank deficiency.
    if (0..l.nrows()).any(|i| l[(i, i)].norm_sqr() <= 1e-12 * scale) {
        return Err(SolverError::Singular);
    }
    let l_inv = l
        .clone()
        .solve_lower_triangular(&DMatrix::identity(l.nrows(), l.ncols()))
        .ok_or(SolverError::Singular)?;
    let whitened = &l_inv * hermitian_part(a) * l_inv.adjoint();
    let (val, y) = lambda_max(&whitened);
    let v = l
        .adjoint()
        .solve_upper_triangular(&y)
        .ok_or(SolverError::Singular)?;
    let n = v.norm();
    Ok((val, v.unscale(n)))
}
