//! Golden-rule coupling coefficients between Bloch states.
//!
//! The scalar coefficient is the y-integral ½∫ q(y) ψ̄_n ψ_m dy evaluated by
//! exact Fourier convolution; its squared modulus is the transition
//! probability per unit time. The electromagnetic variant pairs the vector
//! profile with the shifted gradients of the two cell functions.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::bloch::{BlochEigenpair, TWO_PI};
use crate::error::{Error, Result};
use crate::potential::PeriodicPotential;

/// Separable macroscopic drive factor g(t, x) = g_t(t) · g_x(x).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MacroFactor {
    /// g ≡ amplitude.
    Const { amplitude: f64 },
    /// amplitude · exp(−(t−t0)²/2σ_t²) · exp(−|x−x0|²/2σ_x²).
    GaussianPulse { amplitude: f64, t0: f64, sigma_t: f64, x0: Vec<f64>, sigma_x: f64 },
    /// Smooth cosine ramp from 0 to amplitude over [0, ramp], constant after.
    TurnOn { amplitude: f64, ramp: f64 },
}

impl MacroFactor {
    pub fn eval_t(&self, t: f64) -> f64 {
        match self {
            MacroFactor::Const { amplitude } => *amplitude,
            MacroFactor::GaussianPulse { amplitude, t0, sigma_t, .. } => {
                amplitude * (-(t - t0).powi(2) / (2.0 * sigma_t * sigma_t)).exp()
            }
            MacroFactor::TurnOn { amplitude, ramp } => {
                if t <= 0.0 {
                    0.0
                } else if t >= *ramp {
                    *amplitude
                } else {
                    amplitude * 0.5 * (1.0 - (std::f64::consts::PI * t / ramp).cos())
                }
            }
        }
    }

    pub fn eval_x(&self, x: &[f64]) -> f64 {
        match self {
            MacroFactor::Const { .. } | MacroFactor::TurnOn { .. } => 1.0,
            MacroFactor::GaussianPulse { x0, sigma_x, .. } => {
                let d2: f64 = x.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / (2.0 * sigma_x * sigma_x)).exp()
            }
        }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        self.eval_t(t) * self.eval_x(x)
    }
}

/// Scalar exterior drive d(t,x,y) = g(t,x) · q(y).
#[derive(Clone, Debug)]
pub struct ScalarDriveProfile {
    pub q: PeriodicPotential,
    pub g: MacroFactor,
}

/// Electromagnetic vector drive a(t,x,y) = g(t,x) · a₀(y), one real periodic
/// profile per spatial component.
#[derive(Clone, Debug)]
pub struct VectorDriveProfile {
    pub components: Vec<PeriodicPotential>,
    pub g: MacroFactor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingKind {
    Scalar,
    Em,
}

/// The y-integral factor of a coupling coefficient for one ordered state pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CouplingCoefficient {
    pub kind: CouplingKind,
    pub band_n: usize,
    pub band_m: usize,
    pub theta_n: String,
    pub theta_m: String,
    pub value_re: f64,
    pub value_im: f64,
}

impl CouplingCoefficient {
    pub fn value(&self) -> Complex64 {
        Complex64::new(self.value_re, self.value_im)
    }

    /// |value|²: the transition probability per unit time.
    pub fn transition_probability(&self) -> f64 {
        self.value().norm_sqr()
    }
}

fn check_common_grid(a: &BlochEigenpair, b: &BlochEigenpair, q: &PeriodicPotential) -> Result<()> {
    if a.grid != b.grid || *q.grid() != a.grid {
        return Err(Error::GridMismatch(
            "coupling requires both states and the drive profile on a common grid".to_string(),
        ));
    }
    Ok(())
}

/// ½ ∫ q ψ̄_n ψ_m dy by Fourier convolution (exact for the truncated basis).
pub fn fermi_coupling_scalar(
    q: &PeriodicPotential,
    psi_n: &BlochEigenpair,
    psi_m: &BlochEigenpair,
) -> Result<CouplingCoefficient> {
    check_common_grid(psi_n, psi_m, q)?;
    let grid = psi_n.grid;
    let table = q.difference_table();
    let mut acc = Complex64::default();
    for k_idx in 0..grid.basis_size() {
        let k = grid.mode(k_idx);
        let mut conv = Complex64::default();
        for j_idx in 0..grid.basis_size() {
            let j = grid.mode(j_idx);
            let qc = table.diff(k, j);
            if qc.norm_sqr() > 0.0 {
                conv += qc * psi_m.psi[j_idx];
            }
        }
        acc += psi_n.psi[k_idx].conj() * conv;
    }
    let value = 0.5 * acc;
    Ok(CouplingCoefficient {
        kind: CouplingKind::Scalar,
        band_n: psi_n.band,
        band_m: psi_m.band,
        theta_n: psi_n.theta.to_string(),
        theta_m: psi_m.theta.to_string(),
        value_re: value.re,
        value_im: value.im,
    })
}

/// Electromagnetic coupling:
/// (i/2)∫ ψ_m a·(∇−2iπθⁿ)ψ̄_n dy − (i/2)∫ ψ̄_n a·(∇+2iπθᵐ)ψ_m dy,
/// derivatives applied in coefficient space.
pub fn fermi_coupling_em(
    a: &VectorDriveProfile,
    psi_n: &BlochEigenpair,
    psi_m: &BlochEigenpair,
) -> Result<CouplingCoefficient> {
    let grid = psi_n.grid;
    if a.components.len() != grid.dim() {
        return Err(Error::GridMismatch(format!(
            "vector drive has {} components for dimension {}",
            a.components.len(),
            grid.dim()
        )));
    }
    let theta_n = psi_n.theta_f();
    let theta_m = psi_m.theta_f();
    let half_i = Complex64::new(0.0, 0.5);
    let mut total = Complex64::default();
    for (j, prof) in a.components.iter().enumerate() {
        check_common_grid(psi_n, psi_m, prof)?;
        let table = prof.difference_table();
        // (∇+2iπθ)ψ has coefficients 2iπ(q_j+θ_j) ψ̂(q)
        let symbol = |idx: usize, theta: &[f64]| {
            let q = grid.mode(idx);
            Complex64::new(0.0, TWO_PI * (q[j] as f64 + theta[j]))
        };
        let mut term1 = Complex64::default();
        let mut term2 = Complex64::default();
        for k_idx in 0..grid.basis_size() {
            let k = grid.mode(k_idx);
            let mut conv_m = Complex64::default(); // (a_j * ψ_m)(k)
            let mut conv_dm = Complex64::default(); // (a_j * D_j^m ψ_m)(k)
            for j_idx in 0..grid.basis_size() {
                let q = grid.mode(j_idx);
                let ac = table.diff(k, q);
                if ac.norm_sqr() > 0.0 {
                    conv_m += ac * psi_m.psi[j_idx];
                    conv_dm += ac * symbol(j_idx, &theta_m) * psi_m.psi[j_idx];
                }
            }
            // ∫ ψ_m a_j conj(D_j^n ψ_n) dy
            term1 += conv_m * (symbol(k_idx, &theta_n) * psi_n.psi[k_idx]).conj();
            // ∫ ψ̄_n a_j (D_j^m ψ_m) dy
            term2 += psi_n.psi[k_idx].conj() * conv_dm;
        }
        total += half_i * term1 - half_i * term2;
    }
    Ok(CouplingCoefficient {
        kind: CouplingKind::Em,
        band_n: psi_n.band,
        band_m: psi_m.band,
        theta_n: psi_n.theta.to_string(),
        theta_m: psi_m.theta.to_string(),
        value_re: total.re,
        value_im: total.im,
    })
}

/// Hermitian coupling matrix for a resonant chain ordered [m, n, l₁, …]:
/// only consecutive chain levels couple, giving a zero-diagonal matrix with
/// a single off-diagonal band.
pub fn coupling_matrix_resonant(
    chain: &[BlochEigenpair],
    q: &PeriodicPotential,
) -> Result<DMatrix<Complex64>> {
    if chain.len() < 2 {
        return Err(Error::ChainTooShort(chain.len()));
    }
    let k = chain.len();
    let mut mat = DMatrix::<Complex64>::zeros(k, k);
    for i in 0..k - 1 {
        let coeff = fermi_coupling_scalar(q, &chain[i], &chain[i + 1])?;
        mat[(i, i + 1)] = coeff.value();
        mat[(i + 1, i)] = coeff.value().conj();
    }
    Ok(mat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::band::Tolerances;
    use crate::grid::TorusGrid;
    use crate::theta::BlochTheta;

    fn grid() -> TorusGrid {
        TorusGrid::new(1, 9, 24).unwrap()
    }

    /// Free-potential eigenpair: a single plane wave picked by branch.
    fn plane_wave(g: TorusGrid, k: i64, band: usize, theta: BlochTheta) -> BlochEigenpair {
        let mut psi = vec![Complex64::default(); g.basis_size()];
        psi[g.index_of([k, 0]).unwrap()] = Complex64::new(1.0, 0.0);
        let tf = theta.as_f64()[0];
        BlochEigenpair {
            lambda: crate::bloch::FOUR_PI_SQ * (k as f64 + tf).powi(2),
            theta,
            band,
            psi,
            grid: g,
            residual: 0.0,
        }
    }

    #[test]
    fn constant_drive_orthogonal_states_do_not_couple() {
        let g = TorusGrid::new(1, 17, 48).unwrap();
        let c = PeriodicPotential::mathieu(g);
        let tols = Tolerances::default();
        let theta = BlochTheta::from_ratio(1, 3);
        let (_, p1) = crate::band::verify_state(&c, 1, &theta, &tols).unwrap();
        let (_, p2) = crate::band::verify_state(&c, 2, &theta, &tols).unwrap();
        let q = PeriodicPotential::constant(g, 1.0);
        let d = fermi_coupling_scalar(&q, &p1, &p2).unwrap();
        assert!(d.value().norm() < 1e-12);
    }

    #[test]
    fn plane_wave_cosine_coupling_is_half() {
        let g = grid();
        let n = plane_wave(g, 0, 1, BlochTheta::from_ratio(1, 4));
        let m = plane_wave(g, -1, 2, BlochTheta::from_ratio(3, 4));
        let q = PeriodicPotential::mathieu(g);
        let d = fermi_coupling_scalar(&q, &n, &m).unwrap();
        assert!((d.value() - Complex64::new(0.5, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn em_zero_profile_gives_zero() {
        let g = grid();
        let n = plane_wave(g, 0, 1, BlochTheta::from_ratio(1, 4));
        let m = plane_wave(g, 0, 1, BlochTheta::from_ratio(1, 8));
        let a = VectorDriveProfile {
            components: vec![PeriodicPotential::free(g)],
            g: MacroFactor::Const { amplitude: 1.0 },
        };
        let d = fermi_coupling_em(&a, &n, &m).unwrap();
        assert!(d.value().norm() < 1e-15);
    }

    #[test]
    fn em_constant_vector_couples_same_branch() {
        let g = grid();
        let a0 = 0.8;
        for k in [0i64, 1] {
            let n = plane_wave(g, k, 1, BlochTheta::from_ratio(1, 4));
            let m = plane_wave(g, k, 1, BlochTheta::from_ratio(1, 8));
            let a = VectorDriveProfile {
                components: vec![PeriodicPotential::constant(g, a0)],
                g: MacroFactor::Const { amplitude: 1.0 },
            };
            let d = fermi_coupling_em(&a, &n, &m).unwrap();
            let expect = std::f64::consts::PI * a0 * (2.0 * k as f64 + 0.25 + 0.125);
            assert!(
                (d.value() - Complex64::new(expect, 0.0)).norm() < 1e-10,
                "k={k}: {} vs {expect}",
                d.value()
            );
        }
    }

    #[test]
    fn coupling_is_linear_in_profile() {
        let g = TorusGrid::new(1, 17, 48).unwrap();
        let c = PeriodicPotential::mathieu(g);
        let tols = Tolerances::default();
        let (_, p1) = crate::band::verify_state(&c, 1, &BlochTheta::zero(1), &tols).unwrap();
        let (_, p2) = crate::band::verify_state(&c, 2, &BlochTheta::from_ratio(1, 2), &tols).unwrap();
        let q1 = PeriodicPotential::mathieu(g);
        let q2 = PeriodicPotential::constant(g, 0.7);
        let both = PeriodicPotential::from_coeffs(
            g,
            &q1.coefficients().chain(q2.coefficients()).collect::<Vec<_>>(),
        )
        .unwrap();
        let d1 = fermi_coupling_scalar(&q1, &p1, &p2).unwrap().value();
        let d2 = fermi_coupling_scalar(&q2, &p1, &p2).unwrap().value();
        let db = fermi_coupling_scalar(&both, &p1, &p2).unwrap().value();
        assert!((db - d1 - d2).norm() < 1e-13);
    }

    #[test]
    fn chain_matrix_is_tridiagonal_zero_diagonal() {
        let g = grid();
        let q = PeriodicPotential::mathieu(g);
        let chain: Vec<BlochEigenpair> = (0..4)
            .map(|i| plane_wave(g, i as i64 - 2, i + 1, BlochTheta::from_ratio(i as i64, 4)))
            .collect();
        for len in 2..=4 {
            let mat = coupling_matrix_resonant(&chain[..len], &q).unwrap();
            for r in 0..len {
                for c_ in 0..len {
                    let v = mat[(r, c_)];
                    if r.abs_diff(c_) == 1 {
                        assert!((mat[(c_, r)] - v.conj()).norm() < 1e-15);
                    } else {
                        assert!(v.norm() == 0.0, "({r},{c_}) should be structurally zero");
                    }
                }
            }
        }
        let err = coupling_matrix_resonant(&chain[..1], &q).unwrap_err();
        assert!(matches!(err, Error::ChainTooShort(1)));
    }

    #[test]
    fn macro_factor_presets() {
        let g = MacroFactor::Const { amplitude: 2.5 };
        assert_eq!(g.eval(3.0, &[1.0]), 2.5);
        let g = MacroFactor::TurnOn { amplitude: 1.0, ramp: 1.0 };
        assert_eq!(g.eval_t(-1.0), 0.0);
        assert!((g.eval_t(0.5) - 0.5).abs() < 1e-15);
        assert_eq!(g.eval_t(2.0), 1.0);
        let g = MacroFactor::GaussianPulse {
            amplitude: 1.0,
            t0: 0.0,
            sigma_t: 1.0,
            x0: vec![0.0],
            sigma_x: 1.0,
        };
        assert!((g.eval(1.0, &[1.0]) - (-1.0f64).exp()).abs() < 1e-15);
    }
}
