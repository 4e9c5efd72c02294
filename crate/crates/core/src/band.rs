//! Band sampling, group velocities, and critical-point search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bloch::{assemble_at, solve_bands, solve_values, BlochEigenpair, FOUR_PI_SQ};
use crate::error::{Error, Result};
use crate::grid::TorusGrid;
use crate::potential::PeriodicPotential;
use crate::theta::{snap_to_rational, BlochTheta};

/// Numerical thresholds used throughout band analysis.
#[derive(Clone, Copy, Debug)]
pub struct Tolerances {
    /// Simplicity gap threshold, relative to max(1, |λ|).
    pub gap_tol_rel: f64,
    /// Criticality threshold on ‖∇_θ λ‖.
    pub crit_tol: f64,
    /// Resonance margin threshold.
    pub res_tol: f64,
    /// Fredholm compatibility threshold for corrector right-hand sides.
    pub compat_tol: f64,
    /// Snap-to-rational distance.
    pub snap_tol: f64,
    /// Largest denominator considered when snapping critical points.
    pub q_max: i64,
    /// Initial band count for resonance scans (extended automatically).
    pub p_max: usize,
    /// Step for finite-difference Hessians of λ(θ).
    pub fd_step: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            gap_tol_rel: 1e-6,
            crit_tol: 1e-8,
            res_tol: 1e-8,
            compat_tol: 1e-9,
            snap_tol: 1e-9,
            q_max: 64,
            p_max: 16,
            fd_step: 1e-3,
        }
    }
}

impl Tolerances {
    pub fn gap_tol(&self, lambda: f64) -> f64 {
        self.gap_tol_rel * lambda.abs().max(1.0)
    }
}

/// One band tabulated over a regular θ grid.
#[derive(Clone, Debug)]
pub struct BandSample {
    pub band: usize,
    pub thetas: Vec<BlochTheta>,
    pub lambdas: Vec<f64>,
    /// Distance to the nearest other band at each θ.
    pub gaps: Vec<f64>,
}

/// A verified Bloch state selection.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StateSpec {
    pub band: usize,
    /// Exact rational quasi-momentum, when available.
    pub theta: Option<BlochTheta>,
    pub theta_f: Vec<f64>,
    pub lambda: f64,
    pub gap: f64,
    /// ‖∇_θ λ‖; absent when the eigenvalue is degenerate (not differentiable).
    pub grad_norm: Option<f64>,
    pub a1_verified: bool,
}

impl StateSpec {
    pub fn theta_string(&self) -> String {
        match &self.theta {
            Some(t) => t.to_string(),
            None => self
                .theta_f
                .iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(","),
        }
    }
}

/// Regular rational θ grid with `per_dim` points per dimension.
pub fn theta_grid_regular(dim: usize, per_dim: usize) -> Vec<BlochTheta> {
    let mut grid = Vec::with_capacity(per_dim.pow(dim as u32));
    let n = per_dim.pow(dim as u32);
    for idx in 0..n {
        let mut comps = Vec::with_capacity(dim);
        let mut rem = idx;
        for _ in 0..dim {
            comps.push(num_rational::Ratio::new((rem % per_dim) as i64, per_dim as i64));
            rem /= per_dim;
        }
        comps.reverse();
        grid.push(BlochTheta::new(comps));
    }
    grid
}

/// Tabulate bands `band_lo..=band_hi` over a θ grid, with per-θ gaps.
pub fn sample_band(
    c: &PeriodicPotential,
    band_lo: usize,
    band_hi: usize,
    theta_grid: &[BlochTheta],
) -> Result<Vec<BandSample>> {
    let grid = *c.grid();
    if band_lo == 0 || band_hi < band_lo {
        return Err(Error::Validation(format!(
            "band range {band_lo}..={band_hi} is invalid (bands are 1-based)"
        )));
    }
    if theta_grid.len() < 8usize.pow(grid.dim() as u32) {
        return Err(Error::Validation(
            "theta grid must have at least 8 points per dimension".to_string(),
        ));
    }
    // One extra band above (and the ones below) to compute gaps.
    let solve_n = (band_hi + 1).min(grid.basis_size());
    let rows: Result<Vec<Vec<f64>>> = theta_grid
        .par_iter()
        .map(|theta| {
            let op = assemble_at(c, &theta.as_f64(), &grid)?;
            solve_values(&op, solve_n).map_err(|e| match e {
                Error::EigenConvergence { size } => Error::EigenAccuracy(format!(
                    "eigensolve failed at theta = {theta} (basis {size})"
                )),
                other => other,
            })
        })
        .collect();
    let rows = rows?;
    let mut samples = Vec::new();
    for band in band_lo..=band_hi {
        let mut lambdas = Vec::with_capacity(theta_grid.len());
        let mut gaps = Vec::with_capacity(theta_grid.len());
        for row in &rows {
            let b = band - 1;
            let lam = row[b];
            let mut gap = f64::INFINITY;
            if b > 0 {
                gap = gap.min(lam - row[b - 1]);
            }
            if b + 1 < row.len() {
                gap = gap.min(row[b + 1] - lam);
            }
            lambdas.push(lam);
            gaps.push(gap.max(0.0));
        }
        samples.push(BandSample { band, thetas: theta_grid.to_vec(), lambdas, gaps });
    }
    Ok(samples)
}

/// ∇_θ λ_n(θ) from the first-variation (Hellmann-Feynman) identity:
/// pairing the θ-derivative of the operator with ψ_n gives
/// ∂λ/∂θ_k = 8π² Σ_q (q_k + θ_k) |ψ̂(q)|².
pub fn group_velocity(
    c: &PeriodicPotential,
    theta: &[f64],
    band: usize,
    tols: &Tolerances,
) -> Result<Vec<f64>> {
    let grid = *c.grid();
    let op = assemble_at(c, theta, &grid)?;
    let solve_n = (band + 1).min(grid.basis_size());
    let pairs = solve_bands(&op, solve_n)?;
    let lam = pairs[band - 1].0;
    let gap = adjacent_gap(&pairs.iter().map(|p| p.0).collect::<Vec<_>>(), band);
    if gap < tols.gap_tol(lam) {
        return Err(Error::DegenerateEigenvalue { band, theta: theta.to_vec(), gap });
    }
    Ok(gradient_from_eigvec(&grid, theta, pairs[band - 1].1.as_slice()))
}

pub(crate) fn gradient_from_eigvec(
    grid: &TorusGrid,
    theta: &[f64],
    psi: &[num_complex::Complex64],
) -> Vec<f64> {
    let mut grad = vec![0.0; grid.dim()];
    for (idx, z) in psi.iter().enumerate() {
        let w = z.norm_sqr();
        let k = grid.mode(idx);
        for j in 0..grid.dim() {
            grad[j] += 2.0 * FOUR_PI_SQ * (k[j] as f64 + theta[j]) * w;
        }
    }
    grad
}

fn adjacent_gap(lambdas: &[f64], band: usize) -> f64 {
    let b = band - 1;
    let mut gap = f64::INFINITY;
    if b > 0 {
        gap = gap.min(lambdas[b] - lambdas[b - 1]);
    }
    if b + 1 < lambdas.len() {
        gap = gap.min(lambdas[b + 1] - lambdas[b]);
    }
    gap.max(0.0)
}

/// λ_n at a real θ (helper for finite differences).
pub fn lambda_at(c: &PeriodicPotential, theta: &[f64], band: usize) -> Result<f64> {
    let op = assemble_at(c, theta, c.grid())?;
    Ok(solve_values(&op, band)?[band - 1])
}

/// Finite-difference Hessian of λ_n(θ): 5-point stencil on the diagonal,
/// 4-point cross stencil for mixed entries.
pub fn fd_hessian(c: &PeriodicPotential, theta: &[f64], band: usize, h: f64) -> Result<Vec<Vec<f64>>> {
    let dim = c.grid().dim();
    let lam0 = lambda_at(c, theta, band)?;
    let mut hess = vec![vec![0.0; dim]; dim];
    let shift = |base: &[f64], j: usize, s: f64| {
        let mut t = base.to_vec();
        t[j] += s;
        t
    };
    for j in 0..dim {
        let lpp = lambda_at(c, &shift(theta, j, 2.0 * h), band)?;
        let lp = lambda_at(c, &shift(theta, j, h), band)?;
        let lm = lambda_at(c, &shift(theta, j, -h), band)?;
        let lmm = lambda_at(c, &shift(theta, j, -2.0 * h), band)?;
        hess[j][j] = (-lpp + 16.0 * lp - 30.0 * lam0 + 16.0 * lm - lmm) / (12.0 * h * h);
    }
    for j in 0..dim {
        for k in (j + 1)..dim {
            let mut t = theta.to_vec();
            t[j] += h;
            t[k] += h;
            let lpp = lambda_at(c, &t, band)?;
            t[k] -= 2.0 * h;
            let lpm = lambda_at(c, &t, band)?;
            t[j] -= 2.0 * h;
            let lmm = lambda_at(c, &t, band)?;
            t[k] += 2.0 * h;
            let lmp = lambda_at(c, &t, band)?;
            let v = (lpp + lmm - lpm - lmp) / (4.0 * h * h);
            hess[j][k] = v;
            hess[k][j] = v;
        }
    }
    Ok(hess)
}

/// Solve the cell problem at a rational θ and assemble the verified state
/// record together with its eigenpair.
pub fn verify_state(
    c: &PeriodicPotential,
    band: usize,
    theta: &BlochTheta,
    tols: &Tolerances,
) -> Result<(StateSpec, BlochEigenpair)> {
    let grid = *c.grid();
    let op = crate::bloch::assemble_shifted_operator(c, theta, &grid)?;
    let solve_n = (band + 1).min(grid.basis_size());
    let pairs = crate::bloch::solve_cell_problem(&op, solve_n)?;
    let pair = pairs[band - 1].clone();
    let pair = BlochEigenpair { band, ..pair };
    let lambdas: Vec<f64> = pairs.iter().map(|p| p.lambda).collect();
    let gap = adjacent_gap(&lambdas, band);
    let theta_f = theta.as_f64();
    let simple = gap > tols.gap_tol(pair.lambda);
    let grad_norm = if simple {
        let g = gradient_from_eigvec(&grid, &theta_f, &pair.psi);
        Some(g.iter().map(|x| x * x).sum::<f64>().sqrt())
    } else {
        None
    };
    let spec = StateSpec {
        band,
        theta: Some(theta.clone()),
        theta_f,
        lambda: pair.lambda,
        gap,
        grad_norm,
        a1_verified: simple && grad_norm.is_some_and(|g| g < tols.crit_tol),
    };
    Ok((spec, pair))
}

/// Locate critical points of a sampled band: coarse sign changes of the
/// discrete gradient are refined by damped Newton on the first-variation
/// gradient with a finite-difference Hessian, then snapped to nearby
/// rationals when possible.
pub fn find_critical_points(
    c: &PeriodicPotential,
    sample: &BandSample,
    tols: &Tolerances,
) -> Result<Vec<StateSpec>> {
    let dim = c.grid().dim();
    let band = sample.band;
    let candidates: Vec<Vec<f64>> = if dim == 1 {
        candidates_1d(sample)
    } else {
        candidates_2d(c, sample, tols)?
    };

    let mut found: Vec<StateSpec> = Vec::new();
    for theta0 in candidates {
        let state = refine_candidate(c, band, &theta0, tols);
        // Deduplicate refined points (cyclic distance per component).
        let dup = found.iter().any(|s| {
            s.theta_f
                .iter()
                .zip(&state.theta_f)
                .all(|(a, b)| cyclic_dist(*a, *b) < 1e-6)
        });
        if !dup {
            found.push(state);
        }
    }
    found.sort_by(|a, b| a.theta_f.partial_cmp(&b.theta_f).unwrap());
    Ok(found)
}

fn candidates_1d(sample: &BandSample) -> Vec<Vec<f64>> {
    let n = sample.lambdas.len();
    let mut cands = Vec::new();
    for j in 0..n {
        let prev = sample.lambdas[(j + n - 1) % n];
        let here = sample.lambdas[j];
        let next = sample.lambdas[(j + 1) % n];
        let d_prev = here - prev;
        let d_next = next - here;
        if d_prev * d_next <= 0.0 {
            cands.push(vec![sample.thetas[j].as_f64()[0]]);
        }
    }
    cands
}

fn candidates_2d(
    c: &PeriodicPotential,
    sample: &BandSample,
    tols: &Tolerances,
) -> Result<Vec<Vec<f64>>> {
    // Gradient-norm local minima over the sampled grid (cyclic 4-neighborhood).
    let per_dim = (sample.thetas.len() as f64).sqrt().round() as usize;
    let norms: Vec<f64> = sample
        .thetas
        .iter()
        .map(|t| match group_velocity(c, &t.as_f64(), sample.band, tols) {
            Ok(g) => g.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Err(_) => f64::INFINITY,
        })
        .collect();
    let mut cands = Vec::new();
    for i in 0..per_dim {
        for j in 0..per_dim {
            let here = norms[i * per_dim + j];
            if !here.is_finite() {
                continue;
            }
            let neighbors = [
                norms[((i + 1) % per_dim) * per_dim + j],
                norms[((i + per_dim - 1) % per_dim) * per_dim + j],
                norms[i * per_dim + (j + 1) % per_dim],
                norms[i * per_dim + (j + per_dim - 1) % per_dim],
            ];
            if neighbors.iter().all(|&nb| here <= nb) {
                cands.push(sample.thetas[i * per_dim + j].as_f64());
            }
        }
    }
    Ok(cands)
}

fn refine_candidate(
    c: &PeriodicPotential,
    band: usize,
    theta0: &[f64],
    tols: &Tolerances,
) -> StateSpec {
    let dim = c.grid().dim();
    let mut theta = theta0.to_vec();
    let mut grad = match group_velocity(c, &theta, band, tols) {
        Ok(g) => g,
        Err(_) => return unverified_state(c, band, &theta, tols),
    };
    for _ in 0..50 {
        let gn = norm(&grad);
        if gn < tols.crit_tol {
            break;
        }
        let hess = match fd_hessian(c, &theta, band, tols.fd_step) {
            Ok(h) => h,
            Err(_) => break,
        };
        let step = match newton_step(&hess, &grad) {
            Some(s) => s,
            None => break, // degenerate Hessian, leave candidate as-is
        };
        // Damping: halve until the gradient norm decreases.
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let trial: Vec<f64> = (0..dim).map(|j| theta[j] - t * step[j]).collect();
            match group_velocity(c, &trial, band, tols) {
                Ok(g) if norm(&g) < gn => {
                    theta = trial;
                    grad = g;
                    accepted = true;
                    break;
                }
                _ => t *= 0.5,
            }
        }
        if !accepted {
            break;
        }
    }
    // Wrap into [0,1) and snap to a nearby rational when close enough.
    for x in theta.iter_mut() {
        *x = x.rem_euclid(1.0);
    }
    let snapped: Option<Vec<num_rational::Ratio<i64>>> = theta
        .iter()
        .map(|&x| snap_to_rational(x, tols.q_max, tols.snap_tol))
        .collect();
    match snapped {
        Some(comps) => {
            let rational = BlochTheta::new(comps);
            match verify_state(c, band, &rational, tols) {
                Ok((spec, _)) => spec,
                Err(_) => unverified_state(c, band, &theta, tols),
            }
        }
        None => unverified_state(c, band, &theta, tols),
    }
}

fn unverified_state(c: &PeriodicPotential, band: usize, theta: &[f64], tols: &Tolerances) -> StateSpec {
    let (lambda, gap, grad_norm) = state_diagnostics(c, band, theta, tols);
    StateSpec {
        band,
        theta: None,
        theta_f: theta.to_vec(),
        lambda,
        gap,
        grad_norm,
        a1_verified: false,
    }
}

fn state_diagnostics(
    c: &PeriodicPotential,
    band: usize,
    theta: &[f64],
    tols: &Tolerances,
) -> (f64, f64, Option<f64>) {
    let grid = *c.grid();
    let solve_n = (band + 1).min(grid.basis_size());
    let op = match assemble_at(c, theta, &grid) {
        Ok(op) => op,
        Err(_) => return (f64::MAX, 0.0, None),
    };
    match solve_bands(&op, solve_n) {
        Ok(pairs) => {
            let lambdas: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let lam = lambdas[band - 1];
            let gap = adjacent_gap(&lambdas, band);
            let grad = if gap > tols.gap_tol(lam) {
                Some(norm(&gradient_from_eigvec(&grid, theta, pairs[band - 1].1.as_slice())))
            } else {
                None
            };
            (lam, gap, grad)
        }
        Err(_) => (f64::MAX, 0.0, None),
    }
}

fn newton_step(hess: &[Vec<f64>], grad: &[f64]) -> Option<Vec<f64>> {
    match grad.len() {
        1 => {
            let h = hess[0][0];
            if h.abs() < 1e-10 {
                None
            } else {
                Some(vec![grad[0] / h])
            }
        }
        2 => {
            let det = hess[0][0] * hess[1][1] - hess[0][1] * hess[1][0];
            if det.abs() < 1e-10 {
                None
            } else {
                Some(vec![
                    (hess[1][1] * grad[0] - hess[0][1] * grad[1]) / det,
                    (hess[0][0] * grad[1] - hess[1][0] * grad[0]) / det,
                ])
            }
        }
        _ => None,
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cyclic_dist(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Folded free-band reference 4π²·min over branches |k+θ|² is useful in tests;
/// exported here so callers can rank free branches consistently.
pub fn free_branch_values(theta: f64, n_branches: usize) -> Vec<f64> {
    let mut vals: Vec<f64> = (-(n_branches as i64 + 1)..=(n_branches as i64 + 1))
        .map(|k| FOUR_PI_SQ * (k as f64 + theta).powi(2))
        .collect();
    vals.sort_by(f64::total_cmp);
    vals.truncate(n_branches);
    vals
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::theta::BlochTheta;

    fn grid(m: usize) -> TorusGrid {
        TorusGrid::new(1, m, 2 * m).unwrap()
    }

    #[test]
    fn free_band_is_folded_parabola() {
        let g = grid(9);
        let c = PeriodicPotential::free(g);
        let thetas = theta_grid_regular(1, 8);
        let samples = sample_band(&c, 1, 2, &thetas).unwrap();
        for (j, t) in thetas.iter().enumerate() {
            let th = t.as_f64()[0];
            let expect = free_branch_values(th, 2);
            assert!((samples[0].lambdas[j] - expect[0]).abs() < 1e-11);
            assert!((samples[1].lambdas[j] - expect[1]).abs() < 1e-11);
        }
    }

    #[test]
    fn free_band_two_crossing_at_half() {
        let g = grid(9);
        let c = PeriodicPotential::free(g);
        let thetas = theta_grid_regular(1, 8);
        let samples = sample_band(&c, 2, 2, &thetas).unwrap();
        // θ = 1/2 is index 4 on the 8-point grid; the k=0 and k=-1 branches meet.
        let idx = 4;
        assert!(samples[0].gaps[idx].abs() < 1e-10);
    }

    #[test]
    fn group_velocity_free_branch() {
        let g = grid(9);
        let c = PeriodicPotential::free(g);
        let tols = Tolerances::default();
        let v = group_velocity(&c, &[0.25], 1, &tols).unwrap();
        // d/dθ 4π²θ² = 8π²θ = 2π² at θ=1/4
        assert!((v[0] - 2.0 * std::f64::consts::PI.powi(2)).abs() < 1e-10);
    }

    #[test]
    fn group_velocity_rejects_degenerate() {
        let g = grid(9);
        let c = PeriodicPotential::free(g);
        let tols = Tolerances::default();
        let err = group_velocity(&c, &[0.0], 2, &tols).unwrap_err();
        assert!(matches!(err, Error::DegenerateEigenvalue { .. }));
    }

    #[test]
    fn critical_point_free_band_one() {
        let g = grid(9);
        let c = PeriodicPotential::free(g);
        let tols = Tolerances::default();
        let thetas = theta_grid_regular(1, 16);
        let sample = sample_band(&c, 1, 1, &thetas).unwrap().remove(0);
        let found = find_critical_points(&c, &sample, &tols).unwrap();
        let zero = found
            .iter()
            .find(|s| s.theta_f[0] < 1e-9 || s.theta_f[0] > 1.0 - 1e-9)
            .expect("θ*=0 found");
        assert!(zero.a1_verified);
        assert!(zero.lambda.abs() < 1e-10);
    }

    #[test]
    fn critical_points_mathieu() {
        let g = grid(17);
        let c = PeriodicPotential::mathieu(g);
        let tols = Tolerances::default();
        let thetas = theta_grid_regular(1, 16);
        let samples = sample_band(&c, 1, 2, &thetas).unwrap();
        let b1 = find_critical_points(&c, &samples[0], &tols).unwrap();
        assert!(b1.iter().any(|s| s.a1_verified
            && s.theta.as_ref().is_some_and(|t| t.to_string() == "0/1")));
        let b2 = find_critical_points(&c, &samples[1], &tols).unwrap();
        assert!(b2.iter().any(|s| s.a1_verified
            && s.theta.as_ref().is_some_and(|t| t.to_string() == "1/2")));
    }

    #[test]
    fn evenness_of_bands_for_real_potentials() {
        let g = grid(13);
        let c = PeriodicPotential::from_coeffs(
            g,
            &[
                ([1, 0], num_complex::Complex64::new(0.4, 0.9)),
                ([-1, 0], num_complex::Complex64::new(0.4, -0.9)),
                ([2, 0], num_complex::Complex64::new(-0.3, 0.1)),
                ([-2, 0], num_complex::Complex64::new(-0.3, -0.1)),
            ],
        )
        .unwrap();
        for theta in [0.1, 0.23, 0.41] {
            let a = lambda_at(&c, &[theta], 1).unwrap();
            let b = lambda_at(&c, &[1.0 - theta], 1).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn verify_state_mathieu_band_one() {
        let g = grid(17);
        let c = PeriodicPotential::mathieu(g);
        let tols = Tolerances::default();
        let (spec, pair) = verify_state(&c, 1, &BlochTheta::zero(1), &tols).unwrap();
        assert!(spec.a1_verified);
        assert!(spec.gap > 1.0);
        assert!(pair.residual < 1e-9);
    }
}
