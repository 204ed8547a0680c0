//! Crate-wide error type.

use thiserror::Error;

/// Errors returned by pcrlab operations.
#[derive(Debug, Error)]
pub enum Error {
    /// An input failed validation: non-finite entries, bad dimensions, or
    /// out-of-range parameters.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A model specification violates its invariants.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// A rank or dimension bound was violated, such as `k >= min(n, p)`.
    #[error("rank error: {0}")]
    RankError(String),

    /// The exposure is numerically inside the span of the retained principal
    /// components, so the adjusted test statistic is undefined.
    #[error("degenerate exposure: residual norm ratio {ratio:.3e} is at or below {threshold:.0e}")]
    DegenerateExposure {
        /// Ratio of the residual exposure norm to the raw exposure norm.
        ratio: f64,
        /// Threshold at which the exposure is declared degenerate.
        threshold: f64,
    },

    /// A spectral transform was evaluated on an atom of the limiting bulk law.
    #[error("singularity: evaluation point {alpha} lies on a spectral atom")]
    Singularity {
        /// The offending evaluation point.
        alpha: f64,
    },

    /// The requested quantity is undefined for this input, for example a
    /// close spike where a distant one is required.
    #[error("not applicable: {0}")]
    NotApplicable(String),

    /// The requested quantity has no closed form and the required empirical
    /// constant was not supplied.
    #[error("not available: {0}")]
    NotAvailable(String),

    /// An experiment or CLI configuration is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A numerical routine failed to converge.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
