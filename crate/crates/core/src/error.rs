use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("matrix is not symmetric positive-definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("component {component} is empty (effective size {size:e})")]
    EmptyComponent { component: usize, size: f64 },

    #[error("error variance collapsed in component {component} (value {value:e})")]
    DegenerateVariance { component: usize, value: f64 },

    #[error("k-means produced an empty cluster after {attempts} reseeding attempts")]
    KMeansEmptyCluster { attempts: usize },

    #[error("unknown model id {0:?}; expected one of UUU, UUC, UCU, UCC, CUU, CUC, CCU, CCC")]
    UnknownModel(String),

    #[error("every grid triple failed; last error: {0}")]
    AllFitsFailed(String),
}

impl Error {
    /// Errors caused by bad user input rather than numerical trouble.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Invalid(_) | Error::UnknownModel(_))
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
