//! The shifted Bloch spectral cell problem on the unit torus.
//!
//! In the plane-wave basis e^{2iπk·y} the operator
//! −(div+2iπθ)((∇+2iπθ)·) + c(y) is diagonal in its kinetic part with
//! entries 4π²|k+θ|² and couples modes through the convolution ĉ(k−k′).

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::TorusGrid;
use crate::linalg;
use crate::potential::PeriodicPotential;
use crate::theta::BlochTheta;

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
pub const FOUR_PI_SQ: f64 = TWO_PI * TWO_PI;

/// Assembled Hermitian matrix of the (unshifted) cell operator at a fixed
/// quasi-momentum. The −λ_n shift is applied by callers that need it.
#[derive(Clone, Debug)]
pub struct HermitianOperator {
    grid: TorusGrid,
    theta: Vec<f64>,
    theta_rational: Option<BlochTheta>,
    matrix: DMatrix<Complex64>,
}

impl HermitianOperator {
    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.matrix
    }

    /// Max elementwise deviation from Hermitian symmetry (should be ~0 by
    /// construction; kept as a cheap diagnostic).
    pub fn hermiticity_defect(&self) -> f64 {
        linalg::hermiticity_defect(&self.matrix)
    }
}

/// Assemble the cell operator at a rational quasi-momentum.
pub fn assemble_shifted_operator(
    c: &PeriodicPotential,
    theta: &BlochTheta,
    grid: &TorusGrid,
) -> Result<HermitianOperator> {
    if theta.dim() != grid.dim() {
        return Err(Error::GridMismatch(format!(
            "theta has dimension {}, grid has dimension {}",
            theta.dim(),
            grid.dim()
        )));
    }
    let mut op = assemble_at(c, &theta.as_f64(), grid)?;
    op.theta_rational = Some(theta.clone());
    Ok(op)
}

/// Assemble at an arbitrary real quasi-momentum (used for finite-difference
/// probes and critical-point refinement).
pub fn assemble_at(c: &PeriodicPotential, theta: &[f64], grid: &TorusGrid) -> Result<HermitianOperator> {
    if c.grid() != grid {
        return Err(Error::GridMismatch(
            "potential is defined on a different grid".to_string(),
        ));
    }
    let n = grid.basis_size();
    let table = c.difference_table();
    let mut theta_full = [0.0f64; crate::grid::MAX_DIM];
    theta_full[..grid.dim()].copy_from_slice(&theta[..grid.dim()]);
    let mut matrix = DMatrix::<Complex64>::zeros(n, n);
    for col in 0..n {
        let kp = grid.mode(col);
        for row in 0..n {
            let k = grid.mode(row);
            let mut entry = table.diff(k, kp);
            if row == col {
                entry += FOUR_PI_SQ * grid.shifted_norm_sq(k, &theta_full);
            }
            matrix[(row, col)] = entry;
        }
    }
    Ok(HermitianOperator {
        grid: *grid,
        theta: theta[..grid.dim()].to_vec(),
        theta_rational: None,
        matrix,
    })
}

/// One eigenpair of the cell problem: λ_n(θ) and the normalized,
/// phase-fixed cell eigenfunction in Fourier coefficients.
#[derive(Clone, Debug)]
pub struct BlochEigenpair {
    pub theta: BlochTheta,
    /// 1-based band index.
    pub band: usize,
    pub lambda: f64,
    pub psi: Vec<Complex64>,
    pub grid: TorusGrid,
    /// ‖(H − λ)ψ‖ in the truncated basis.
    pub residual: f64,
}

impl BlochEigenpair {
    pub fn theta_f(&self) -> Vec<f64> {
        self.theta.as_f64()
    }
}

/// Solve for the lowest `n_bands` eigenpairs, eigenvalues ascending with
/// multiplicity, eigenvectors orthonormal and phase-fixed (largest-modulus
/// coefficient real positive, ties broken by the lexicographically smallest
/// mode index).
pub fn solve_cell_problem(op: &HermitianOperator, n_bands: usize) -> Result<Vec<BlochEigenpair>> {
    let theta = op.theta_rational.clone().ok_or_else(|| {
        Error::Validation(
            "solve_cell_problem needs an operator assembled at a rational theta".to_string(),
        )
    })?;
    let raw = solve_bands(op, n_bands)?;
    Ok(raw
        .into_iter()
        .enumerate()
        .map(|(i, (lambda, psi, residual))| BlochEigenpair {
            theta: theta.clone(),
            band: i + 1,
            lambda,
            psi: psi.as_slice().to_vec(),
            grid: op.grid,
            residual,
        })
        .collect())
}

/// Raw eigensolve used internally at real theta: (λ, ψ, residual) triples.
pub(crate) fn solve_bands(
    op: &HermitianOperator,
    n_bands: usize,
) -> Result<Vec<(f64, DVector<Complex64>, f64)>> {
    let size = op.grid.basis_size();
    if n_bands == 0 || n_bands > size {
        return Err(Error::Validation(format!(
            "n_bands must lie in 1..={size}, got {n_bands}"
        )));
    }
    let (values, mut vectors) = linalg::hermitian_eigen(&op.matrix)?;
    // Gram check on the returned bands.
    let mut max_dev = 0.0f64;
    for i in 0..n_bands {
        for j in i..n_bands {
            let mut dot = Complex64::default();
            for r in 0..size {
                dot += vectors[i][r].conj() * vectors[j][r];
            }
            let expect = if i == j { 1.0 } else { 0.0 };
            max_dev = max_dev.max((dot - expect).norm());
        }
    }
    if max_dev > 1e-10 {
        return Err(Error::EigenAccuracy(format!(
            "eigenvector Gram matrix deviates from identity by {max_dev:.3e}"
        )));
    }
    let mut out = Vec::with_capacity(n_bands);
    for i in 0..n_bands {
        let v = &mut vectors[i];
        normalize_and_fix_phase(v);
        let residual = (&op.matrix * &*v - &*v * Complex64::new(values[i], 0.0)).norm();
        out.push((values[i], v.clone(), residual));
    }
    Ok(out)
}

/// Eigenvalues only (cheap path for band sampling).
pub(crate) fn solve_values(op: &HermitianOperator, n_bands: usize) -> Result<Vec<f64>> {
    let size = op.grid.basis_size();
    if n_bands == 0 || n_bands > size {
        return Err(Error::Validation(format!(
            "n_bands must lie in 1..={size}, got {n_bands}"
        )));
    }
    let (values, _) = linalg::hermitian_eigen(&op.matrix)?;
    Ok(values[..n_bands].to_vec())
}

fn normalize_and_fix_phase(v: &mut DVector<Complex64>) {
    let norm = v.norm();
    // Strictly-greater scan keeps the first (lexicographically smallest) index on ties.
    let mut imax = 0;
    let mut best = 0.0f64;
    for (i, z) in v.iter().enumerate() {
        let n = z.norm();
        if n > best {
            best = n;
            imax = i;
        }
    }
    let pivot = v[imax];
    let phase = pivot / pivot.norm();
    let scale = phase.conj() / norm;
    for z in v.iter_mut() {
        *z *= scale;
    }
}

/// L²(T^N) pairing via Parseval: ∫ f ḡ dy = Σ_k f̂(k) conj(ĝ(k)).
pub fn inner_product(grid: &TorusGrid, f: &[Complex64], g: &[Complex64]) -> Result<Complex64> {
    grid.check_len(f.len())?;
    grid.check_len(g.len())?;
    Ok(f.iter().zip(g).map(|(a, b)| a * b.conj()).sum())
}

/// Inverse discrete Fourier evaluation on the grid's collocation points.
pub fn evaluate_on_grid(psi: &[Complex64], grid: &TorusGrid) -> Result<Vec<Complex64>> {
    grid.evaluate(psi)
}
