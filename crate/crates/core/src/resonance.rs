//! Non-resonance verification and resonant-chain discovery.
//!
//! The drive built for a state pair (n, m) conserves momentum and energy, so
//! besides the target it can populate "mirror" states at momentum
//! (k+1)θⁿ − kθᵐ and energy (k+1)λₙ − kλₘ. Scanning the spectrum at those
//! momenta is finite: eigenvalues increase, so once the highest solved band
//! clears the target energy the tail cannot resonate.

use serde::{Deserialize, Serialize};

use crate::band::{verify_state, StateSpec, Tolerances};
use crate::bloch::{assemble_at, solve_values};
use crate::error::{Error, Result};
use crate::potential::PeriodicPotential;
use crate::theta::BlochTheta;

/// One scanned level of the resonance ladder.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelReport {
    /// Ladder index; level k probes momentum (k+1)θⁿ − kθᵐ.
    pub k: usize,
    pub theta: BlochTheta,
    pub target_energy: f64,
    /// Bands whose eigenvalue hits the target within the resonance tolerance.
    pub resonant_bands: Vec<usize>,
    pub margin: f64,
    /// First band index whose eigenvalue certifies the tail bound.
    pub tail_band: usize,
    pub tail_lambda: f64,
}

/// Verdict for a state pair, with the scanned evidence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResonanceReport {
    pub n: StateSpec,
    pub m: StateSpec,
    pub nonresonant: bool,
    /// min over scanned bands of |λ_p − target| at the first level.
    pub margin: f64,
    pub levels: Vec<LevelReport>,
    /// Resonant chain [m, n, l₁, …] when resonances were found.
    pub chain: Option<Vec<StateSpec>>,
    pub warnings: Vec<String>,
}

fn scan_level(
    c: &PeriodicPotential,
    theta: &BlochTheta,
    target: f64,
    k: usize,
    tols: &Tolerances,
) -> Result<LevelReport> {
    let grid = *c.grid();
    let res_tol = tols.res_tol * target.abs().max(1.0);
    let mut n_bands = tols.p_max.min(grid.basis_size());
    loop {
        let op = assemble_at(c, &theta.as_f64(), &grid)?;
        let lambdas = solve_values(&op, n_bands)?;
        let top = *lambdas.last().unwrap();
        if top <= target + res_tol {
            if n_bands == grid.basis_size() {
                return Err(Error::TailBoundNotCertified {
                    band: n_bands,
                    lambda: top,
                    target,
                });
            }
            n_bands = (2 * n_bands).min(grid.basis_size());
            continue;
        }
        // Tail certified: the first band above target + tol bounds the scan.
        let tail_band = lambdas.iter().position(|&l| l > target + res_tol).unwrap() + 1;
        let mut margin = f64::INFINITY;
        let mut resonant_bands = Vec::new();
        for (i, &lam) in lambdas.iter().take(tail_band).enumerate() {
            let dist = (lam - target).abs();
            margin = margin.min(dist);
            if dist <= res_tol {
                resonant_bands.push(i + 1);
            }
        }
        return Ok(LevelReport {
            k,
            theta: theta.clone(),
            target_energy: target,
            resonant_bands,
            margin,
            tail_band,
            tail_lambda: lambdas[tail_band - 1],
        });
    }
}

fn state_a1_warning(spec: &StateSpec, label: &str) -> Option<String> {
    if spec.a1_verified {
        None
    } else {
        Some(format!(
            "state {label} (band {}, theta {}) fails the simple-critical-point check: gap {:.3e}, |grad| {}",
            spec.band,
            spec.theta_string(),
            spec.gap,
            spec.grad_norm.map_or("n/a (degenerate)".to_string(), |g| format!("{g:.3e}")),
        ))
    }
}

fn rational_thetas(n: &StateSpec, m: &StateSpec) -> Result<(BlochTheta, BlochTheta)> {
    match (&n.theta, &m.theta) {
        (Some(a), Some(b)) => Ok((a.clone(), b.clone())),
        _ => Err(Error::Validation(
            "resonance scans need exact rational quasi-momenta for both states".to_string(),
        )),
    }
}

/// Check the level-1 mirror state at momentum 2θⁿ−θᵐ, energy 2λₙ−λₘ.
pub fn check_nonresonance(
    c: &PeriodicPotential,
    n: &StateSpec,
    m: &StateSpec,
    tols: &Tolerances,
) -> Result<ResonanceReport> {
    let (tn, tm) = rational_thetas(n, m)?;
    let mut warnings = Vec::new();
    warnings.extend(state_a1_warning(n, "n"));
    warnings.extend(state_a1_warning(m, "m"));
    let theta = BlochTheta::combine(&tn, 2, &tm, -1)?;
    let target = 2.0 * n.lambda - m.lambda;
    let level = scan_level(c, &theta, target, 1, tols)?;
    let nonresonant = level.resonant_bands.is_empty();
    let chain = if nonresonant {
        None
    } else {
        let mut chain = vec![m.clone(), n.clone()];
        for &band in &level.resonant_bands {
            let (spec, _) = verify_state(c, band, &theta, tols)?;
            warnings.extend(state_a1_warning(&spec, "l"));
            chain.push(spec);
        }
        Some(chain)
    };
    Ok(ResonanceReport {
        n: n.clone(),
        m: m.clone(),
        nonresonant,
        margin: level.margin,
        levels: vec![level],
        chain,
        warnings,
    })
}

/// Walk the resonance ladder k = 1, 2, … until a level is clear.
///
/// Every resonant state found is appended to the chain (ordered
/// [m, n, l₁, …]) and checked for the simple-critical-point condition; a
/// failure there is a warning, not an error. If `k_max` levels are all
/// resonant the walk refuses to truncate the chain and errors out.
pub fn find_resonance_chain(
    c: &PeriodicPotential,
    n: &StateSpec,
    m: &StateSpec,
    k_max: usize,
    tols: &Tolerances,
) -> Result<ResonanceReport> {
    let (tn, tm) = rational_thetas(n, m)?;
    let mut warnings = Vec::new();
    warnings.extend(state_a1_warning(n, "n"));
    warnings.extend(state_a1_warning(m, "m"));
    let mut levels = Vec::new();
    let mut chain = vec![m.clone(), n.clone()];
    let mut first_margin = f64::INFINITY;
    for k in 1..=k_max {
        let theta = BlochTheta::combine(&tn, k as i64 + 1, &tm, -(k as i64))?;
        let target = (k as f64 + 1.0) * n.lambda - k as f64 * m.lambda;
        let level = scan_level(c, &theta, target, k, tols)?;
        if k == 1 {
            first_margin = level.margin;
        }
        let resonant = !level.resonant_bands.is_empty();
        if resonant {
            for &band in &level.resonant_bands {
                let (spec, _) = verify_state(c, band, &theta, tols)?;
                warnings.extend(state_a1_warning(&spec, &format!("l{k}")));
                chain.push(spec);
            }
        }
        levels.push(level);
        if !resonant {
            // This level's margin certifies the ladder terminates here.
            let nonresonant = levels.len() == 1;
            return Ok(ResonanceReport {
                n: n.clone(),
                m: m.clone(),
                nonresonant,
                margin: first_margin,
                levels,
                chain: if chain.len() > 2 { Some(chain) } else { None },
                warnings,
            });
        }
    }
    Err(Error::ResonanceChainOverflow { k_max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TorusGrid;

    fn free_state(c: &PeriodicPotential, band: usize, num: i64, den: i64) -> StateSpec {
        let tols = Tolerances::default();
        let (spec, _) = verify_state(c, band, &BlochTheta::from_ratio(num, den), &tols).unwrap();
        spec
    }

    #[test]
    fn free_pair_is_resonant_with_zero_margin() {
        let grid = TorusGrid::new(1, 9, 24).unwrap();
        let c = PeriodicPotential::free(grid);
        let tols = Tolerances::default();
        let n = free_state(&c, 1, 1, 4);
        let m = free_state(&c, 1, 3, 4);
        let report = check_nonresonance(&c, &n, &m, &tols).unwrap();
        assert!(!report.nonresonant);
        assert!(report.margin < 1e-12);
        let chain = report.chain.unwrap();
        // level-1 state: band 1 at θ = 3/4 with λ = π²/4
        assert_eq!(chain.len(), 3);
        assert_eq!(chain[2].band, 1);
        assert_eq!(chain[2].theta_string(), "3/4");
        assert!((chain[2].lambda - std::f64::consts::PI.powi(2) / 4.0).abs() < 1e-10);
        // the pair itself is not critical, which must be surfaced
        assert!(!report.warnings.is_empty());
    }

    #[test]
    fn free_chain_never_terminates() {
        let grid = TorusGrid::new(1, 9, 24).unwrap();
        let c = PeriodicPotential::free(grid);
        let tols = Tolerances::default();
        let n = free_state(&c, 1, 1, 4);
        let m = free_state(&c, 1, 3, 4);
        let err = find_resonance_chain(&c, &n, &m, 6, &tols).unwrap_err();
        assert!(matches!(err, Error::ResonanceChainOverflow { k_max: 6 }));
    }

    #[test]
    fn target_below_spectrum_is_nonresonant() {
        let grid = TorusGrid::new(1, 17, 48).unwrap();
        let c = PeriodicPotential::mathieu(grid);
        let tols = Tolerances::default();
        let n = free_state(&c, 1, 0, 1); // Mathieu ground state, λ < 0
        let m = free_state(&c, 2, 1, 2); // band edge, λ ≈ π² + 1
        // target = 2λ₁(0) − λ₂(1/2) < min c: below the whole spectrum
        let report = check_nonresonance(&c, &n, &m, &tols).unwrap();
        assert!(report.nonresonant);
        assert!(report.margin > 1.0);
        assert!(report.levels[0].tail_lambda > report.levels[0].target_energy);
        assert!(report.warnings.is_empty(), "{:?}", report.warnings);
    }

    #[test]
    fn nonresonant_pair_chain_is_trivial() {
        let grid = TorusGrid::new(1, 17, 48).unwrap();
        let c = PeriodicPotential::mathieu(grid);
        let tols = Tolerances::default();
        let n = free_state(&c, 1, 0, 1);
        let m = free_state(&c, 2, 1, 2);
        let report = find_resonance_chain(&c, &n, &m, 4, &tols).unwrap();
        assert!(report.nonresonant);
        assert!(report.chain.is_none());
        assert_eq!(report.levels.len(), 1);
    }

    #[test]
    fn margin_is_monotone_in_scanned_bands() {
        let grid = TorusGrid::new(1, 17, 48).unwrap();
        let c = PeriodicPotential::mathieu(grid);
        let n = free_state(&c, 1, 0, 1);
        let m = free_state(&c, 2, 1, 2);
        let mut last = f64::INFINITY;
        for p_max in [2, 4, 8, 16] {
            let tols = Tolerances { p_max, ..Default::default() };
            let report = check_nonresonance(&c, &n, &m, &tols).unwrap();
            assert!(report.margin <= last + 1e-12);
            assert!(report.nonresonant);
            last = report.margin;
        }
    }
}
