//! Thin wrappers around rustfft with the e^{-2iπ} forward convention.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Signed frequency of FFT bin `i` for transform length `n`.
pub fn signed_freq(i: usize, n: usize) -> i64 {
    if i <= n / 2 - (n + 1) % 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// One-dimensional in-place transforms of a fixed length.
pub struct Fft1d {
    len: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
}

impl Fft1d {
    pub fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(len);
        let inv = planner.plan_fft_inverse(len);
        let scratch_len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        Self { len, fwd, inv, scratch: vec![Complex64::default(); scratch_len] }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    /// X[k] = Σ_r x[r] e^{-2iπ k r / n}, unnormalized.
    pub fn forward(&mut self, data: &mut [Complex64]) {
        debug_assert_eq!(data.len(), self.len);
        self.fwd.process_with_scratch(data, &mut self.scratch);
    }

    /// x[r] = Σ_k X[k] e^{+2iπ k r / n}, unnormalized.
    pub fn inverse(&mut self, data: &mut [Complex64]) {
        debug_assert_eq!(data.len(), self.len);
        self.inv.process_with_scratch(data, &mut self.scratch);
    }
}

/// Row-major transforms over 1 or 2 dimensions of equal length per axis.
pub struct FftNd {
    dim: usize,
    per_dim: usize,
    fft: Fft1d,
}

impl FftNd {
    pub fn new(dim: usize, per_dim: usize) -> Self {
        assert!(dim == 1 || dim == 2, "only 1D and 2D transforms are supported");
        Self { dim, per_dim, fft: Fft1d::new(per_dim) }
    }

    pub fn total_len(&self) -> usize {
        self.per_dim.pow(self.dim as u32)
    }

    pub fn forward(&mut self, data: &mut [Complex64]) {
        self.transform(data, true);
    }

    pub fn inverse(&mut self, data: &mut [Complex64]) {
        self.transform(data, false);
    }

    fn transform(&mut self, data: &mut [Complex64], forward: bool) {
        assert_eq!(data.len(), self.total_len());
        let n = self.per_dim;
        let run = |fft: &mut Fft1d, row: &mut [Complex64]| {
            if forward {
                fft.forward(row)
            } else {
                fft.inverse(row)
            }
        };
        for row in data.chunks_exact_mut(n) {
            run(&mut self.fft, row);
        }
        if self.dim == 2 {
            transpose_square(data, n);
            for row in data.chunks_exact_mut(n) {
                run(&mut self.fft, row);
            }
            transpose_square(data, n);
        }
    }
}

fn transpose_square(data: &mut [Complex64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            data.swap(i * n + j, j * n + i);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signed_freq_layout() {
        assert_eq!((0..4).map(|i| signed_freq(i, 4)).collect::<Vec<_>>(), vec![0, 1, -2, -1]);
        assert_eq!((0..5).map(|i| signed_freq(i, 5)).collect::<Vec<_>>(), vec![0, 1, 2, -2, -1]);
    }

    #[test]
    fn forward_inverse_round_trip() {
        let mut fft = Fft1d::new(8);
        let orig: Vec<Complex64> = (0..8).map(|i| Complex64::new(i as f64, -(i as f64))).collect();
        let mut data = orig.clone();
        fft.forward(&mut data);
        fft.inverse(&mut data);
        for (a, b) in data.iter().zip(&orig) {
            assert!((a / 8.0 - b).norm() < 1e-13);
        }
    }

    #[test]
    fn two_dimensional_single_mode() {
        let n = 4;
        let mut fft = FftNd::new(2, n);
        // e^{2iπ(x + 2y)} on the grid should land in bin (1, 2).
        let mut data = vec![Complex64::default(); n * n];
        for i in 0..n {
            for j in 0..n {
                let phase = 2.0 * std::f64::consts::PI * (i as f64 + 2.0 * j as f64) / n as f64;
                data[i * n + j] = Complex64::new(phase.cos(), phase.sin());
            }
        }
        fft.forward(&mut data);
        for i in 0..n {
            for j in 0..n {
                let expect = if (i, j) == (1, 2) { (n * n) as f64 } else { 0.0 };
                assert!(
                    (data[i * n + j] - expect).norm() < 1e-10,
                    "bin ({i},{j}) = {}",
                    data[i * n + j]
                );
            }
        }
    }
}
