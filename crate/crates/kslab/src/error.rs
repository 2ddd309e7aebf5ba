use thiserror::Error;

/// Library-wide error type.
///
/// The split mirrors the two failure classes the CLI distinguishes:
/// `Parameter` for rejected inputs (bad domains, inconsistent grids, unknown
/// config keys — exit code 2) and `Convergence` for numerical failures that
/// only show up at runtime (eigensolver stagnation, projection bracketing —
/// exit code 3).
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameter, domain violation, or inconsistent configuration.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// An iterative method failed to converge or a numerical contract broke.
    #[error("convergence error: {0}")]
    Convergence(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}

pub(crate) fn converge<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Convergence(msg.into()))
}
