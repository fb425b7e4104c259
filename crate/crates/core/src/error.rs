use thiserror::Error;

/// Errors produced by the library.
///
/// `Invalid`, `NonErgodic` and `Config` indicate bad inputs; `Numerical` and
/// `Enumeration` indicate that a computation could not be completed at the
/// requested accuracy or size.
#[derive(Debug, Error)]
pub enum Error {
    /// A domain invariant was violated (bad matrix, parameter out of range, ...).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// The Markov chain is reducible or periodic.
    #[error("chain is not ergodic: {0}")]
    NonErgodic(String),

    /// An exact enumeration exceeded its configured limit.
    #[error("enumeration limit exceeded: {0}")]
    Enumeration(String),

    /// A solver failed to converge or diverged.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A configuration file failed to parse or validate.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by malformed input rather than numerics.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_) | Error::NonErgodic(_) | Error::Config(_) | Error::Json(_) | Error::Io(_)
        )
    }
}
