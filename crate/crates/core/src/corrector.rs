//! Corrector cell problems and the effective-mass tensor.
//!
//! At a simple critical point the shifted operator A = H(θ) − λ_n is singular
//! with kernel ψ_n. The corrector systems are solved through the bordered
//! Hermitian system [[A, ψ],[ψᴴ, 0]], which enforces the ⟨ψ, ζ⟩ = 0 gauge
//! directly and is nonsingular whenever the eigenvalue is simple. The
//! Fredholm compatibility of each right-hand side is checked and reported.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::band::{fd_hessian, Tolerances};
use crate::bloch::{assemble_at, BlochEigenpair, FOUR_PI_SQ, TWO_PI};
use crate::error::{Error, Result};
use crate::grid::TorusGrid;
use crate::linalg;
use crate::potential::PeriodicPotential;

/// First-order corrector ζᵏ_n for one θ-direction.
#[derive(Clone, Debug)]
pub struct CorrectorZeta {
    pub band: usize,
    pub direction: usize,
    pub zeta: Vec<Complex64>,
    /// |⟨ψ, rhs⟩| before projection (Fredholm compatibility defect).
    pub compat: f64,
    /// ‖A ζ − rhs_⊥‖ after the solve.
    pub residual: f64,
}

/// Second-order corrector χᵏˡ_n.
#[derive(Clone, Debug)]
pub struct CorrectorChi {
    pub band: usize,
    pub directions: (usize, usize),
    pub chi: Vec<Complex64>,
    pub compat: f64,
    pub residual: f64,
}

/// Real symmetric band-curvature tensor A*_n (may be indefinite).
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EffectiveMassTensor {
    pub band: usize,
    pub theta: Vec<f64>,
    pub a_star: Vec<Vec<f64>>,
    /// (1/8π²)·finite-difference Hessian used as cross-check.
    pub fd_reference: Vec<Vec<f64>>,
    pub max_rel_delta: f64,
    pub asymmetry: f64,
}

/// Right-hand side of the ζ system: per mode q, 4iπ(q_k+θ_k)ψ̂(q).
pub(crate) fn zeta_rhs(
    grid: &TorusGrid,
    theta: &[f64],
    psi: &[Complex64],
    k: usize,
) -> DVector<Complex64> {
    DVector::from_iterator(
        psi.len(),
        psi.iter().enumerate().map(|(idx, z)| {
            let q = grid.mode(idx);
            Complex64::new(0.0, 2.0 * TWO_PI * (q[k] as f64 + theta[k])) * z
        }),
    )
}

/// Deflated solve of A x = rhs with A singular along `psi`.
///
/// The right-hand side is first projected onto ψ⊥; the projection
/// coefficient is the Fredholm compatibility defect and must stay below
/// `compat_tol` (absolute, with a ‖rhs‖ floor). Returns (x, compat, residual).
pub(crate) fn bordered_solve(
    a: &DMatrix<Complex64>,
    psi: &DVector<Complex64>,
    rhs: &DVector<Complex64>,
    compat_tol: f64,
) -> Result<(DVector<Complex64>, f64, f64)> {
    let n = a.nrows();
    let proj = psi.dotc(rhs); // ⟨rhs, ψ⟩ in the ∫ f ḡ convention
    let compat = proj.norm();
    let scale = rhs.norm().max(1.0);
    if compat > compat_tol * scale {
        return Err(Error::Compatibility { residual: compat, tol: compat_tol });
    }
    let rhs_perp = rhs - psi * proj;
    let mut big = DMatrix::<Complex64>::zeros(n + 1, n + 1);
    big.view_mut((0, 0), (n, n)).copy_from(a);
    for i in 0..n {
        big[(i, n)] = psi[i];
        big[(n, i)] = psi[i].conj();
    }
    let mut brhs = DVector::<Complex64>::zeros(n + 1);
    brhs.rows_mut(0, n).copy_from(&rhs_perp);
    let sol = linalg::lu_solve(big, brhs)?;
    let x = sol.rows(0, n).into_owned();
    let residual = (a * &x - &rhs_perp).norm();
    if residual > 1e-8 * scale {
        return Err(Error::CorrectorResidual { residual });
    }
    Ok((x, compat, residual))
}

fn shifted_matrix(c: &PeriodicPotential, pair: &BlochEigenpair) -> Result<DMatrix<Complex64>> {
    let op = assemble_at(c, &pair.theta_f(), &pair.grid)?;
    let mut a = op.matrix().clone();
    for i in 0..a.nrows() {
        a[(i, i)] -= Complex64::new(pair.lambda, 0.0);
    }
    Ok(a)
}

/// Solve the first-order corrector problem in direction `k` (0-based).
pub fn solve_corrector_zeta(
    c: &PeriodicPotential,
    pair: &BlochEigenpair,
    k: usize,
    tols: &Tolerances,
) -> Result<CorrectorZeta> {
    let grid = pair.grid;
    let theta = pair.theta_f();
    let a = shifted_matrix(c, pair)?;
    let psi = DVector::from_column_slice(&pair.psi);
    let rhs = zeta_rhs(&grid, &theta, &pair.psi, k);
    let (zeta, compat, residual) = bordered_solve(&a, &psi, &rhs, tols.compat_tol)?;
    Ok(CorrectorZeta { band: pair.band, direction: k, zeta: zeta.as_slice().to_vec(), compat, residual })
}

/// Right-hand side of the χ system given both ζ's and the Hessian entry.
pub(crate) fn chi_rhs(
    grid: &TorusGrid,
    theta: &[f64],
    psi: &[Complex64],
    zeta_k: &[Complex64],
    zeta_l: &[Complex64],
    k: usize,
    l: usize,
    hess_kl: f64,
) -> DVector<Complex64> {
    let delta = if k == l { 1.0 } else { 0.0 };
    DVector::from_iterator(
        psi.len(),
        (0..psi.len()).map(|idx| {
            let q = grid.mode(idx);
            let dk = Complex64::new(0.0, 2.0 * TWO_PI * (q[k] as f64 + theta[k]));
            let dl = Complex64::new(0.0, 2.0 * TWO_PI * (q[l] as f64 + theta[l]));
            dk * zeta_l[idx]
                + dl * zeta_k[idx]
                + (2.0 * delta - hess_kl / FOUR_PI_SQ) * psi[idx]
        }),
    )
}

/// Solve the second-order corrector problem for directions (k, l).
///
/// The compatibility of this system is equivalent to the curvature formula
/// for the Hessian entry, so a verified `hess_kl` makes it solvable; the
/// defect is reported.
pub fn solve_corrector_chi(
    c: &PeriodicPotential,
    pair: &BlochEigenpair,
    zeta_k: &CorrectorZeta,
    zeta_l: &CorrectorZeta,
    hess_kl: f64,
    tols: &Tolerances,
) -> Result<CorrectorChi> {
    let grid = pair.grid;
    let theta = pair.theta_f();
    let a = shifted_matrix(c, pair)?;
    let psi = DVector::from_column_slice(&pair.psi);
    let rhs = chi_rhs(
        &grid,
        &theta,
        &pair.psi,
        &zeta_k.zeta,
        &zeta_l.zeta,
        zeta_k.direction,
        zeta_l.direction,
        hess_kl,
    );
    // The χ compatibility tolerance is one order looser than ζ's.
    let (chi, compat, residual) = bordered_solve(&a, &psi, &rhs, 10.0 * tols.compat_tol)?;
    Ok(CorrectorChi {
        band: pair.band,
        directions: (zeta_k.direction, zeta_l.direction),
        chi: chi.as_slice().to_vec(),
        compat,
        residual,
    })
}

/// Assemble A*_n from the six-term corrector integral and cross-validate it
/// against (1/8π²) times the finite-difference Hessian of λ_n(θ).
///
/// Fourier form of each pairing: with D_j the symbol 2iπ(q_j+θ_j),
/// the ζ terms contribute ⟨ψ, D_j ζᵏ⟩ and −⟨D_j ψ, ζᵏ⟩.
pub fn effective_mass_tensor(
    c: &PeriodicPotential,
    pair: &BlochEigenpair,
    zetas: &[CorrectorZeta],
    tols: &Tolerances,
) -> Result<EffectiveMassTensor> {
    let grid = pair.grid;
    let dim = grid.dim();
    if zetas.len() != dim {
        return Err(Error::Validation(format!(
            "need one corrector per direction ({dim}), got {}",
            zetas.len()
        )));
    }
    let theta = pair.theta_f();
    let symbol = |idx: usize, j: usize| {
        let q = grid.mode(idx);
        Complex64::new(0.0, TWO_PI * (q[j] as f64 + theta[j]))
    };
    let zeta_of = |j: usize| -> &[Complex64] {
        &zetas.iter().find(|z| z.direction == j).expect("corrector per direction").zeta
    };

    let mut two_a = vec![vec![Complex64::default(); dim]; dim];
    for j in 0..dim {
        for k in 0..dim {
            let zk = zeta_of(k);
            let zj = zeta_of(j);
            let mut acc = Complex64::default();
            for idx in 0..pair.psi.len() {
                let psi = pair.psi[idx];
                // ψ e_j·e_k ψ̄ twice
                if j == k {
                    acc += 2.0 * psi * psi.conj();
                }
                // ψ e_j·(∇−2iπθ)ζ̄ᵏ  = ψ · conj(D_j ζᵏ)
                acc += psi * (symbol(idx, j) * zk[idx]).conj();
                // ψ e_k·(∇−2iπθ)ζ̄ʲ
                acc += psi * (symbol(idx, k) * zj[idx]).conj();
                // −ζ̄ᵏ (∇+2iπθ)ψ·e_j
                acc -= symbol(idx, j) * psi * zk[idx].conj();
                // −ζ̄ʲ (∇+2iπθ)ψ·e_k
                acc -= symbol(idx, k) * psi * zj[idx].conj();
            }
            two_a[j][k] = acc;
        }
    }

    let mut a_star = vec![vec![0.0; dim]; dim];
    let mut asymmetry = 0.0f64;
    for j in 0..dim {
        for k in 0..dim {
            let sym = 0.25 * (two_a[j][k] + two_a[k][j]);
            asymmetry = asymmetry.max((two_a[j][k] - two_a[k][j]).norm() / 2.0);
            asymmetry = asymmetry.max(sym.im.abs());
            a_star[j][k] = sym.re;
        }
    }

    let hess = fd_hessian(c, &theta, pair.band, tols.fd_step)?;
    let fd_reference: Vec<Vec<f64>> =
        hess.iter().map(|row| row.iter().map(|h| h / (2.0 * FOUR_PI_SQ)).collect()).collect();
    let scale = fd_reference
        .iter()
        .flatten()
        .map(|x| x.abs())
        .fold(0.0, f64::max)
        .max(1e-12);
    let mut max_rel_delta = 0.0f64;
    for j in 0..dim {
        for k in 0..dim {
            max_rel_delta = max_rel_delta.max((a_star[j][k] - fd_reference[j][k]).abs() / scale);
        }
    }
    if max_rel_delta > 1e-4 {
        return Err(Error::CrossValidation { delta: max_rel_delta, tol: 1e-4 });
    }
    Ok(EffectiveMassTensor {
        band: pair.band,
        theta: theta.clone(),
        a_star,
        fd_reference,
        max_rel_delta,
        asymmetry,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::band::{verify_state, Tolerances};
    use crate::theta::BlochTheta;

    fn setup_mathieu() -> (PeriodicPotential, BlochEigenpair, Tolerances) {
        let grid = TorusGrid::new(1, 17, 48).unwrap();
        let c = PeriodicPotential::mathieu(grid);
        let tols = Tolerances::default();
        let (_, pair) = verify_state(&c, 1, &BlochTheta::zero(1), &tols).unwrap();
        (c, pair, tols)
    }

    #[test]
    fn free_correctors_vanish() {
        let grid = TorusGrid::new(1, 9, 24).unwrap();
        let c = PeriodicPotential::free(grid);
        let tols = Tolerances::default();
        let (_, pair) = verify_state(&c, 1, &BlochTheta::zero(1), &tols).unwrap();
        let z = solve_corrector_zeta(&c, &pair, 0, &tols).unwrap();
        assert!(z.zeta.iter().all(|v| v.norm() < 1e-12));
        assert!(z.compat < 1e-12);
        let chi = solve_corrector_chi(&c, &pair, &z, &z, 2.0 * FOUR_PI_SQ, &tols).unwrap();
        assert!(chi.chi.iter().all(|v| v.norm() < 1e-10));
    }

    #[test]
    fn free_effective_mass_is_identity() {
        let grid = TorusGrid::new(1, 9, 24).unwrap();
        let c = PeriodicPotential::free(grid);
        let tols = Tolerances::default();
        let (_, pair) = verify_state(&c, 1, &BlochTheta::zero(1), &tols).unwrap();
        let z = solve_corrector_zeta(&c, &pair, 0, &tols).unwrap();
        let t = effective_mass_tensor(&c, &pair, &[z], &tols).unwrap();
        assert!((t.a_star[0][0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn mathieu_corrector_is_gauged_and_compatible() {
        let (c, pair, tols) = setup_mathieu();
        let z = solve_corrector_zeta(&c, &pair, 0, &tols).unwrap();
        assert!(z.compat < 1e-9, "compat = {}", z.compat);
        assert!(z.residual < 1e-9, "residual = {}", z.residual);
        let gauge = crate::bloch::inner_product(&pair.grid, &pair.psi, &z.zeta).unwrap();
        assert!(gauge.norm() < 1e-10);
    }

    #[test]
    fn mathieu_effective_mass_matches_fd() {
        let (c, pair, tols) = setup_mathieu();
        let z = solve_corrector_zeta(&c, &pair, 0, &tols).unwrap();
        let t = effective_mass_tensor(&c, &pair, &[z], &tols).unwrap();
        assert!(t.max_rel_delta < 1e-4);
        assert!(t.a_star[0][0] > 0.0, "band bottom has positive curvature");
    }

    #[test]
    fn gauge_shift_leaves_tensor_unchanged() {
        let (c, pair, tols) = setup_mathieu();
        let z = solve_corrector_zeta(&c, &pair, 0, &tols).unwrap();
        let base = effective_mass_tensor(&c, &pair, &[z.clone()], &tols).unwrap();
        for alpha in [
            Complex64::new(0.7, 0.0),
            Complex64::new(-0.7, 0.0),
            Complex64::new(0.0, 1.3),
        ] {
            let mut shifted = z.clone();
            for (zv, pv) in shifted.zeta.iter_mut().zip(&pair.psi) {
                *zv += alpha * pv;
            }
            let t = effective_mass_tensor(&c, &pair, &[shifted], &tols).unwrap();
            assert!(
                (t.a_star[0][0] - base.a_star[0][0]).abs() < 1e-12,
                "gauge shift by {alpha} moved A* by {}",
                (t.a_star[0][0] - base.a_star[0][0]).abs()
            );
        }
    }

    #[test]
    fn chi_compatibility_closes_with_curvature_value() {
        let (c, pair, tols) = setup_mathieu();
        let z = solve_corrector_zeta(&c, &pair, 0, &tols).unwrap();
        let t = effective_mass_tensor(&c, &pair, &[z.clone()], &tols).unwrap();
        let hess_kl = t.a_star[0][0] * 2.0 * FOUR_PI_SQ;
        let chi = solve_corrector_chi(&c, &pair, &z, &z, hess_kl, &tols).unwrap();
        assert!(chi.compat < 1e-8, "compat = {}", chi.compat);
        assert!(chi.residual < 1e-8);
    }

    #[test]
    fn compatibility_violation_is_detected() {
        // A non-critical state has an incompatible ζ right-hand side.
        let grid = TorusGrid::new(1, 17, 48).unwrap();
        let c = PeriodicPotential::mathieu(grid);
        let tols = Tolerances::default();
        let (_, pair) = verify_state(&c, 1, &BlochTheta::from_ratio(1, 4), &tols).unwrap();
        let err = solve_corrector_zeta(&c, &pair, 0, &tols).unwrap_err();
        assert!(matches!(err, Error::Compatibility { .. }));
    }
}
