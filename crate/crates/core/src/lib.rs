//! Bloch-band toolkit for periodic Schrödinger problems.
//!
//! The crate covers the whole pipeline: the shifted cell eigenproblem in a
//! truncated plane-wave basis, band sampling with critical-point search and
//! corrector solves for effective-mass tensors, golden-rule coupling
//! coefficients for scalar and electromagnetic drives, a spectral Strang
//! propagator for the coupled macroscopic system, and a direct ε-scale
//! solver used for two-scale convergence studies.

pub mod band;
pub mod bloch;
pub mod corrector;
pub mod coupling;
pub mod error;
pub mod fftutil;
pub mod fine;
pub mod grid;
pub mod homogenized;
pub mod pipeline;
pub mod potential;
pub mod resonance;
pub mod scenario;
pub mod theta;

mod linalg;

pub use band::{
    fd_hessian, find_critical_points, group_velocity, sample_band, theta_grid_regular,
    verify_state, BandSample, StateSpec, Tolerances,
};
pub use bloch::{
    assemble_at, assemble_shifted_operator, evaluate_on_grid, inner_product, solve_cell_problem,
    BlochEigenpair, HermitianOperator, FOUR_PI_SQ, TWO_PI,
};
pub use corrector::{
    effective_mass_tensor, solve_corrector_chi, solve_corrector_zeta, CorrectorChi, CorrectorZeta,
    EffectiveMassTensor,
};
pub use coupling::{
    coupling_matrix_resonant, fermi_coupling_em, fermi_coupling_scalar, CouplingCoefficient,
    CouplingKind, MacroFactor, ScalarDriveProfile, VectorDriveProfile,
};
pub use error::{Error, Result};
pub use fine::{
    convergence_study, extract_band_amplitudes, remainder_norm, BandAmplitude, ConvergenceRow,
    Envelope, FineAnalyzer, FineField, FineRunResult, FineScenario, FineStepper,
};
pub use grid::{Mode, TorusGrid, MAX_DIM};
pub use homogenized::{
    dispersion_phase, total_mass, AmplitudeState, CouplingField, HomogenizedSystem, MacroGrid,
    Propagator, RunRecord,
};
pub use potential::PeriodicPotential;
pub use resonance::{check_nonresonance, find_resonance_chain, LevelReport, ResonanceReport};
pub use scenario::{load_scenario, Scenario};
pub use theta::{snap_to_rational, BlochTheta};
