use thiserror::Error;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the decoupling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two grid points coincide (within tolerance) on a branch axis, so the
    /// Lagrange denominators of the derivative filters would vanish.
    #[error("degenerate z-grid{}", match .branch { Some(b) => format!(" on branch {b}"), None => String::new() })]
    DegenerateGrid { branch: Option<usize> },

    #[error("singular value decomposition did not converge")]
    SvdFailed,

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateGrid { .. } | Error::SvdFailed | Error::NonFinite(_) | Error::Numerical(_)
        )
    }
}
