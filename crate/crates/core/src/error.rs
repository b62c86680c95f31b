use thiserror::Error;

use crate::memorization::RankCertificate;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric: max deviation {deviation:e} exceeds {tolerance:e}")]
    Asymmetric { deviation: f64, tolerance: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("eigensolver did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("parameter count {count} exceeds the oracle limit of {limit}")]
    TooManyParameters { count: usize, limit: usize },

    #[error("jacobian has rank {} but {} samples need full row rank", .0.rank, .0.required_rank)]
    RankDeficient(Box<RankCertificate>),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the caller's setup.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Asymmetric { .. }
                | Error::InvalidInput(_)
                | Error::DegenerateFit(_)
                | Error::NoConvergence { .. }
                | Error::RankDeficient(_)
        )
    }
}
