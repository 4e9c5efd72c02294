//! Dense Hermitian eigensolves and linear solves used across the crate.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

const EIGEN_MAX_SWEEPS: usize = 100_000;

/// Eigenvalues (ascending) and matching orthonormal eigenvectors of a
/// Hermitian matrix.
pub(crate) fn hermitian_eigen(mat: &DMatrix<Complex64>) -> Result<(Vec<f64>, Vec<DVector<Complex64>>)> {
    let size = mat.nrows();
    let eig = mat
        .clone()
        .try_symmetric_eigen(f64::EPSILON, EIGEN_MAX_SWEEPS)
        .ok_or(Error::EigenConvergence { size })?;
    let mut order: Vec<usize> = (0..size).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    Ok((values, vectors))
}

/// Max elementwise deviation from Hermitian symmetry.
pub(crate) fn hermiticity_defect(mat: &DMatrix<Complex64>) -> f64 {
    let mut max = 0.0f64;
    for i in 0..mat.nrows() {
        for j in i..mat.ncols() {
            max = max.max((mat[(i, j)] - mat[(j, i)].conj()).norm());
        }
    }
    max
}

/// LU solve of a dense square system.
pub(crate) fn lu_solve(mat: DMatrix<Complex64>, rhs: DVector<Complex64>) -> Result<DVector<Complex64>> {
    let lu = mat.lu();
    lu.solve(&rhs)
        .ok_or_else(|| Error::CorrectorResidual { residual: f64::INFINITY })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_is_exact() {
        // Dense Hermitian solve on a diagonal matrix must reproduce the
        // diagonal to machine precision; the free-potential exactness
        // property depends on this.
        let n = 21;
        let diag: Vec<f64> = (0..n).map(|k| {
            let q = k as i64 - 10;
            4.0 * std::f64::consts::PI.powi(2) * (q as f64 + 0.25).powi(2)
        }).collect();
        let mut mat = DMatrix::<Complex64>::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            mat[(i, i)] = Complex64::new(d, 0.0);
        }
        let (values, vectors) = hermitian_eigen(&mat).unwrap();
        let mut expect = diag.clone();
        expect.sort_by(f64::total_cmp);
        for (v, e) in values.iter().zip(&expect) {
            assert!((v - e).abs() <= 1e-12 * e.abs().max(1.0), "{v} vs {e}");
        }
        // eigenvectors stay canonical basis vectors up to phase
        for vec in &vectors {
            let max = vec.iter().map(|z| z.norm()).fold(0.0, f64::max);
            assert!((max - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn known_two_by_two() {
        let mut mat = DMatrix::<Complex64>::zeros(2, 2);
        mat[(0, 0)] = Complex64::new(1.0, 0.0);
        mat[(1, 1)] = Complex64::new(-1.0, 0.0);
        mat[(0, 1)] = Complex64::new(0.0, 2.0);
        mat[(1, 0)] = Complex64::new(0.0, -2.0);
        let (values, vectors) = hermitian_eigen(&mat).unwrap();
        let r = 5.0f64.sqrt();
        assert!((values[0] + r).abs() < 1e-12);
        assert!((values[1] - r).abs() < 1e-12);
        for (i, v) in vectors.iter().enumerate() {
            let mv = &mat * v;
            assert!((mv - v * Complex64::new(values[i], 0.0)).norm() < 1e-12);
        }
    }
}
