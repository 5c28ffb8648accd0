use thiserror::Error;

/// Errors surfaced by the simulation toolkit.
#[derive(Debug, Error)]
pub enum SimError {
    /// A scenario or parameter failed validation.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A numeric domain violation (coincident points, zero entries, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Probing found no base-station peak above the threshold.
    #[error("no BS detected: every probing measurement stayed at or below the threshold")]
    NoBsDetected,

    /// Probing found no user peak above the threshold.
    #[error("no UE detected: every probing measurement stayed at or below the threshold")]
    NoUeDetected,

    /// An iterative routine produced a non-finite value.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Codebook or result file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// Too many Monte Carlo trials failed to trust the aggregate.
    #[error("{failed} of {total} trials failed (more than 10%); first error: {first}")]
    TooManyTrialFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// The semidefinite relaxation backend failed to produce a solution.
    #[error("sdp solver failure: {0}")]
    Sdp(String),
}
