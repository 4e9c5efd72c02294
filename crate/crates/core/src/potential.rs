//! Real periodic potentials stored as sparse Fourier coefficients.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{Mode, TorusGrid};

const REALITY_TOL: f64 = 1e-12;

/// A real, bounded periodic field on the unit torus, c(y) = Σ ĉ(k) e^{2iπk·y}.
///
/// Reality is enforced on construction: ĉ(-k) = conj(ĉ(k)).
#[derive(Clone, Debug)]
pub struct PeriodicPotential {
    grid: TorusGrid,
    // sorted by linear mode index; zero coefficients dropped
    coeffs: Vec<(usize, Mode, Complex64)>,
}

impl PeriodicPotential {
    /// c ≡ 0.
    pub fn free(grid: TorusGrid) -> Self {
        Self { grid, coeffs: Vec::new() }
    }

    /// The Mathieu-type potential 2cos(2πy₁) (+ 2cos(2πy₂) in 2D).
    pub fn mathieu(grid: TorusGrid) -> Self {
        let one = Complex64::new(1.0, 0.0);
        let mut list: Vec<(Mode, Complex64)> = vec![([1, 0], one), ([-1, 0], one)];
        if grid.dim() == 2 {
            list.push(([0, 1], one));
            list.push(([0, -1], one));
        }
        Self::from_coeffs(grid, &list).expect("preset coefficients fit any valid grid")
    }

    /// Constant potential c ≡ v0.
    pub fn constant(grid: TorusGrid, v0: f64) -> Self {
        Self::from_coeffs(grid, &[([0, 0], Complex64::new(v0, 0.0))]).unwrap()
    }

    /// Build from an explicit coefficient list, validating support and reality.
    pub fn from_coeffs(grid: TorusGrid, list: &[(Mode, Complex64)]) -> Result<Self> {
        let mut dense: Vec<(usize, Mode, Complex64)> = Vec::new();
        for &(k, c) in list {
            let idx = grid.index_of(k).ok_or(Error::ModeOverflow {
                mode: k[..grid.dim()].to_vec(),
                modes_per_dim: grid.modes_per_dim(),
            })?;
            match dense.iter_mut().find(|(i, _, _)| *i == idx) {
                Some((_, _, acc)) => *acc += c,
                None => dense.push((idx, k, c)),
            }
        }
        dense.retain(|(_, _, c)| c.norm() > 0.0);
        for &(_, k, c) in &dense {
            let neg = [-k[0], -k[1]];
            let mate = dense
                .iter()
                .find(|(_, kk, _)| *kk == neg)
                .map(|(_, _, cc)| *cc)
                .unwrap_or_default();
            if (mate - c.conj()).norm() > REALITY_TOL {
                return Err(Error::Validation(format!(
                    "potential is not real: coefficient at {:?} is {c}, at {:?} is {mate}; they must be conjugate",
                    &k[..grid.dim()],
                    &neg[..grid.dim()]
                )));
            }
        }
        dense.sort_by_key(|(i, _, _)| *i);
        Ok(Self { grid, coeffs: dense })
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn coefficients(&self) -> impl Iterator<Item = (Mode, Complex64)> + '_ {
        self.coeffs.iter().map(|&(_, k, c)| (k, c))
    }

    /// ĉ(k), zero outside the stored support.
    pub fn coeff(&self, k: Mode) -> Complex64 {
        match self.grid.index_of(k) {
            Some(idx) => self
                .coeffs
                .binary_search_by_key(&idx, |(i, _, _)| *i)
                .map(|pos| self.coeffs[pos].2)
                .unwrap_or_default(),
            None => Complex64::default(),
        }
    }

    /// Dense lookup table over mode differences k−k′, offsets in
    /// [-(M-1), M-1] per dimension. Used by operator assembly.
    pub(crate) fn difference_table(&self) -> DifferenceTable {
        let span = 2 * self.grid.modes_per_dim() - 1;
        let mut table = vec![Complex64::default(); span.pow(self.grid.dim() as u32)];
        let off = (self.grid.modes_per_dim() - 1) as i64;
        for &(_, k, c) in &self.coeffs {
            let mut idx = 0usize;
            for j in 0..self.grid.dim() {
                idx = idx * span + (k[j] + off) as usize;
            }
            table[idx] = c;
        }
        DifferenceTable { dim: self.grid.dim(), span, off, table }
    }

    /// Direct evaluation at an arbitrary point of the torus.
    pub fn eval_at(&self, y: &[f64]) -> Complex64 {
        let mut acc = Complex64::default();
        for &(_, k, c) in &self.coeffs {
            let mut phase = 0.0;
            for j in 0..self.grid.dim() {
                phase += k[j] as f64 * y[j];
            }
            let (s, co) = (2.0 * std::f64::consts::PI * phase).sin_cos();
            acc += c * Complex64::new(co, s);
        }
        acc
    }

    /// Real values on the collocation grid.
    pub fn values_real(&self) -> Result<Vec<f64>> {
        let mut coeffs = vec![Complex64::default(); self.grid.basis_size()];
        for &(i, _, c) in &self.coeffs {
            coeffs[i] = c;
        }
        let values = self.grid.evaluate(&coeffs)?;
        let max_imag = values.iter().map(|v| v.im.abs()).fold(0.0, f64::max);
        if max_imag > 1e-10 {
            return Err(Error::Validation(format!(
                "potential evaluated with imaginary part {max_imag:.3e}; reality is violated"
            )));
        }
        Ok(values.into_iter().map(|v| v.re).collect())
    }

    /// Lower bound min_y c(y), from a refined sampling of the torus.
    pub fn min_value(&self) -> f64 {
        if self.coeffs.is_empty() {
            return 0.0;
        }
        let fine = 4 * self.grid.real_points_per_dim();
        let n = fine.pow(self.grid.dim() as u32);
        let mut min = f64::INFINITY;
        for idx in 0..n {
            let mut y = [0.0; crate::grid::MAX_DIM];
            let mut rem = idx;
            for j in (0..self.grid.dim()).rev() {
                y[j] = (rem % fine) as f64 / fine as f64;
                rem /= fine;
            }
            min = min.min(self.eval_at(&y).re);
        }
        min
    }
}

pub(crate) struct DifferenceTable {
    dim: usize,
    span: usize,
    off: i64,
    table: Vec<Complex64>,
}

impl DifferenceTable {
    /// ĉ(k − k′); offsets are always in range for modes of the same grid.
    pub fn diff(&self, k: Mode, kp: Mode) -> Complex64 {
        let mut idx = 0usize;
        for j in 0..self.dim {
            idx = idx * self.span + (k[j] - kp[j] + self.off) as usize;
        }
        self.table[idx]
    }
}
