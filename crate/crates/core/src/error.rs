//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the solvers, integrators, and the online loop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("time step {dt} does not divide the horizon {horizon} (relative defect {defect:e})")]
    StepMismatch { dt: f64, horizon: f64, defect: f64 },

    #[error("state blew up at t = {t} (norm {norm:e} exceeds the guard)")]
    BlowUp { t: f64, norm: f64 },

    #[error("singular linear system in integrator step at t = {t}")]
    SingularStep { t: f64 },

    #[error(
        "Riccati iteration did not converge after {iterations} iterations (defect {defect:e})"
    )]
    NonConvergence { iterations: usize, defect: f64 },

    #[error("no stabilizing initial gain found for the Riccati solve")]
    NotStabilizable,

    #[error("closed loop is not stable: monodromy spectral radius {radius}")]
    UnstableClosedLoop { radius: f64 },

    #[error("operator declares no period; the periodic Riccati solver needs one")]
    AperiodicOperator,

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("training parameters must be pairwise distinct (indices {0} and {1} coincide)")]
    DuplicateParameter(usize, usize),

    #[error("parameter {0:?} lies outside the declared parameter box")]
    ParameterOutsideBox(Vec<f64>),

    #[error("parameter {0:?} is not a member of the training set")]
    UnknownParameter(Vec<f64>),

    #[error("candidate subset is empty")]
    EmptySubset,

    #[error("IO record meshes do not match: {0}")]
    MeshMismatch(String),

    #[error("norm samples must be positive for a decay fit (sample {index} is {value})")]
    NonPositiveNorm { index: usize, value: f64 },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("invalid refinement level {0} (expected 0, 1 or 2)")]
    InvalidLevel(usize),

    #[error("levels {0} and {1} are not nested in the requested direction")]
    NonNestedLevels(usize, usize),

    #[error("library build failed for training parameter {index} ({parameter:?}): {source}")]
    LibraryBuild {
        index: usize,
        parameter: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed library file: {0}")]
    LibraryFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
