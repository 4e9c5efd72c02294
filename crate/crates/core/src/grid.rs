//! Truncated plane-wave discretization of the unit torus.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fftutil::FftNd;

/// Maximum spatial dimension handled by the toolkit.
pub const MAX_DIM: usize = 2;

/// Integer Fourier mode, padded to the fixed coordinate width.
pub type Mode = [i64; MAX_DIM];

/// Fourier/collocation discretization of the unit torus T^N.
///
/// Modes k satisfy |k_j| <= (M-1)/2 with M odd, ordered lexicographically;
/// the collocation grid has R >= M points per dimension so trigonometric
/// quadrature is exact on the represented modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TorusGrid {
    dim: usize,
    modes_per_dim: usize,
    real_points_per_dim: usize,
}

impl TorusGrid {
    pub fn new(dim: usize, modes_per_dim: usize, real_points_per_dim: usize) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::Validation(format!("dimension must be 1 or 2, got {dim}")));
        }
        if modes_per_dim < 3 || modes_per_dim % 2 == 0 {
            return Err(Error::Validation(format!(
                "modes_per_dim must be odd and >= 3, got {modes_per_dim}"
            )));
        }
        if real_points_per_dim < modes_per_dim {
            return Err(Error::Validation(format!(
                "real_points_per_dim ({real_points_per_dim}) must be >= modes_per_dim ({modes_per_dim})"
            )));
        }
        Ok(Self { dim, modes_per_dim, real_points_per_dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modes_per_dim(&self) -> usize {
        self.modes_per_dim
    }

    pub fn real_points_per_dim(&self) -> usize {
        self.real_points_per_dim
    }

    /// Largest mode magnitude per dimension, (M-1)/2.
    pub fn half(&self) -> i64 {
        (self.modes_per_dim as i64 - 1) / 2
    }

    /// Number of basis functions, M^dim.
    pub fn basis_size(&self) -> usize {
        self.modes_per_dim.pow(self.dim as u32)
    }

    /// Number of collocation points, R^dim.
    pub fn n_points(&self) -> usize {
        self.real_points_per_dim.pow(self.dim as u32)
    }

    /// Decode a linear basis index into its mode (lexicographic order).
    pub fn mode(&self, idx: usize) -> Mode {
        debug_assert!(idx < self.basis_size());
        let m = self.modes_per_dim;
        let half = self.half();
        let mut k = [0i64; MAX_DIM];
        let mut rem = idx;
        for j in (0..self.dim).rev() {
            k[j] = (rem % m) as i64 - half;
            rem /= m;
        }
        k
    }

    /// Linear basis index of a mode, if it lies in the mode set.
    pub fn index_of(&self, k: Mode) -> Option<usize> {
        let m = self.modes_per_dim;
        let half = self.half();
        let mut idx = 0usize;
        for j in 0..self.dim {
            if k[j].abs() > half {
                return None;
            }
            idx = idx * m + (k[j] + half) as usize;
        }
        Some(idx)
    }

    pub fn modes(&self) -> impl Iterator<Item = Mode> + '_ {
        (0..self.basis_size()).map(move |i| self.mode(i))
    }

    /// Collocation point for a linear point index, components in [0, 1).
    pub fn point(&self, idx: usize) -> [f64; MAX_DIM] {
        debug_assert!(idx < self.n_points());
        let r = self.real_points_per_dim;
        let mut y = [0.0; MAX_DIM];
        let mut rem = idx;
        for j in (0..self.dim).rev() {
            y[j] = (rem % r) as f64 / r as f64;
            rem /= r;
        }
        y
    }

    /// |k + θ|² for the kinetic symbol.
    pub fn shifted_norm_sq(&self, k: Mode, theta: &[f64]) -> f64 {
        let mut s = 0.0;
        for j in 0..self.dim {
            let v = k[j] as f64 + theta[j];
            s += v * v;
        }
        s
    }

    /// Inverse discrete Fourier evaluation of a coefficient vector on the
    /// collocation grid: f(y_r) = Σ_k c(k) e^{2iπ k·y_r}.
    pub fn evaluate(&self, coeffs: &[Complex64]) -> Result<Vec<Complex64>> {
        self.check_len(coeffs.len())?;
        let r = self.real_points_per_dim;
        let mut spec = vec![Complex64::default(); self.n_points()];
        for (idx, &c) in coeffs.iter().enumerate() {
            let k = self.mode(idx);
            spec[self.bin_of(k)] += c;
        }
        let mut fft = FftNd::new(self.dim, r);
        fft.inverse(&mut spec);
        Ok(spec)
    }

    /// Trigonometric projection of grid values back onto the mode set:
    /// c(k) = (1/R^dim) Σ_r f(y_r) e^{-2iπ k·y_r}. Exact for trigonometric
    /// polynomials supported on the mode set.
    pub fn project(&self, values: &[Complex64]) -> Result<Vec<Complex64>> {
        if values.len() != self.n_points() {
            return Err(Error::GridMismatch(format!(
                "expected {} grid values, got {}",
                self.n_points(),
                values.len()
            )));
        }
        let mut spec = values.to_vec();
        let mut fft = FftNd::new(self.dim, self.real_points_per_dim);
        fft.forward(&mut spec);
        let norm = 1.0 / self.n_points() as f64;
        let coeffs = (0..self.basis_size())
            .map(|idx| spec[self.bin_of(self.mode(idx))] * norm)
            .collect();
        Ok(coeffs)
    }

    fn bin_of(&self, k: Mode) -> usize {
        let r = self.real_points_per_dim as i64;
        let mut idx = 0usize;
        for j in 0..self.dim {
            idx = idx * r as usize + k[j].rem_euclid(r) as usize;
        }
        idx
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<()> {
        if len != self.basis_size() {
            return Err(Error::GridMismatch(format!(
                "expected {} coefficients for the grid's mode set, got {len}",
                self.basis_size()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_indexing_is_lexicographic_and_symmetric() {
        let g = TorusGrid::new(2, 5, 8).unwrap();
        assert_eq!(g.basis_size(), 25);
        assert_eq!(g.mode(0), [-2, -2]);
        assert_eq!(g.mode(24), [2, 2]);
        for i in 0..g.basis_size() {
            let k = g.mode(i);
            assert_eq!(g.index_of(k), Some(i));
            // k in set implies -k in set
            assert!(g.index_of([-k[0], -k[1]]).is_some());
        }
        assert_eq!(g.index_of([3, 0]), None);
    }

    #[test]
    fn evaluate_project_round_trip() {
        let g = TorusGrid::new(1, 7, 16).unwrap();
        let mut coeffs = vec![Complex64::default(); g.basis_size()];
        coeffs[g.index_of([1, 0]).unwrap()] = Complex64::new(0.3, -0.7);
        coeffs[g.index_of([-3, 0]).unwrap()] = Complex64::new(-1.1, 0.2);
        let values = g.evaluate(&coeffs).unwrap();
        let back = g.project(&values).unwrap();
        for (a, b) in back.iter().zip(&coeffs) {
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn evaluate_constant_and_cosine() {
        let g = TorusGrid::new(1, 5, 12).unwrap();
        let mut coeffs = vec![Complex64::default(); g.basis_size()];
        coeffs[g.index_of([0, 0]).unwrap()] = Complex64::new(1.0, 0.0);
        let values = g.evaluate(&coeffs).unwrap();
        assert!(values.iter().all(|v| (v - 1.0).norm() < 1e-13));

        let mut coeffs = vec![Complex64::default(); g.basis_size()];
        coeffs[g.index_of([1, 0]).unwrap()] = Complex64::new(1.0, 0.0);
        coeffs[g.index_of([-1, 0]).unwrap()] = Complex64::new(1.0, 0.0);
        let values = g.evaluate(&coeffs).unwrap();
        for (r, v) in values.iter().enumerate() {
            let y = r as f64 / 12.0;
            let expect = 2.0 * (2.0 * std::f64::consts::PI * y).cos();
            assert!((v.re - expect).abs() < 1e-12 && v.im.abs() < 1e-13);
        }
    }
}
