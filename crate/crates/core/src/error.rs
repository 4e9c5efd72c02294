use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("scenario parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("scenario validation error: {0}")]
    Validation(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("Fourier mode {mode:?} lies outside the grid's mode set (modes_per_dim = {modes_per_dim})")]
    ModeOverflow { mode: Vec<i64>, modes_per_dim: usize },

    #[error("Hermitian eigensolver failed to converge (basis {size}); raise the mode count or loosen the tolerance")]
    EigenConvergence { size: usize },

    #[error("eigensolver accuracy check failed: {0}")]
    EigenAccuracy(String),

    #[error("eigenvalue for band {band} is degenerate at theta = {theta:?} (gap {gap:.3e}); the branch is not differentiable there")]
    DegenerateEigenvalue { band: usize, theta: Vec<f64>, gap: f64 },

    #[error("Fredholm compatibility violated: |<psi, rhs>| = {residual:.3e} exceeds {tol:.1e}; the state is not critical/simple enough")]
    Compatibility { residual: f64, tol: f64 },

    #[error("corrector solve ill-conditioned or inaccurate: residual {residual:.3e}")]
    CorrectorResidual { residual: f64 },

    #[error("effective-mass cross-validation failed: relative delta {delta:.3e} exceeds {tol:.1e} (under-resolved basis or bad state)")]
    CrossValidation { delta: f64, tol: f64 },

    #[error("cannot certify the non-resonance tail bound: highest solved band {band} has lambda = {lambda:.6} which does not exceed the target {target:.6} plus tolerance")]
    TailBoundNotCertified { band: usize, lambda: f64, target: f64 },

    #[error("resonance chain still resonant after k_max = {k_max} levels; refusing to truncate it silently")]
    ResonanceChainOverflow { k_max: usize },

    #[error("resonant coupling chain must contain at least two states, got {0}")]
    ChainTooShort(usize),

    #[error("coupling matrix is not Hermitian (defect {defect:.3e})")]
    NonHermitianCoupling { defect: f64 },

    #[error("commensurability violated: theta = {theta} times L*M = {scale} is not an integer, so the Bloch phase is not periodic on the box")]
    Commensurability { theta: String, scale: i64 },

    #[error("envelope tail mass fraction {fraction:.3e} exceeds 1e-8; enlarge the box")]
    EnvelopeTail { fraction: f64 },

    #[error("time step {dt:.3e} violates the scenario bound {bound:.3e}")]
    TimeStep { dt: f64, bound: f64 },

    #[error("non-finite field value detected at step {step}")]
    NonFinite { step: usize },

    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("convergence study member eps = {eps} failed: {source}")]
    ConvergenceMember {
        eps: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the CLI: 2 config/validation, 3 numerical,
    /// 4 assumption (a1/a2) violation.
    pub fn exit_code(&self) -> u8 {
        use Error::*;
        match self {
            Parse { .. } | Validation(_) | GridMismatch(_) | ModeOverflow { .. }
            | Commensurability { .. } | EnvelopeTail { .. } | TimeStep { .. }
            | ChainTooShort(_) | NonHermitianCoupling { .. } | Io(_) => 2,
            EigenConvergence { .. } | EigenAccuracy(_) | CorrectorResidual { .. }
            | CrossValidation { .. } | NonFinite { .. } => 3,
            DegenerateEigenvalue { .. } | Compatibility { .. } | TailBoundNotCertified { .. }
            | ResonanceChainOverflow { .. } | AssumptionViolated(_) => 4,
            ConvergenceMember { source, .. } => source.exit_code(),
        }
    }
}
