use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("moment system is singular for order {order} (tried degrees up to {max_degree})")]
    SingularMomentSystem { order: usize, max_degree: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid lattice shape: {0}")]
    InvalidShape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("sample covariance is nearly singular (min/max eigenvalue ratio {ratio:.3e})")]
    NearSingularCovariance { ratio: f64 },

    #[error("symmetric eigendecomposition did not converge")]
    EigendecompositionFailure,

    #[error("matrix is rank deficient (rank {rank} < {expected})")]
    RankDeficient { rank: usize, expected: usize },

    #[error("sample too large for the reference implementation: n = {n} > {max}")]
    SampleTooLarge { n: usize, max: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("no sampler registered for link `{0}`")]
    UnsupportedLink(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// True for failures that come from the filesystem or from malformed
    /// input files, as opposed to numerical or validation failures.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Parse(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
