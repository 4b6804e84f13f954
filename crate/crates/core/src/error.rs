use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("no unique stationary law: {0}")]
    NotIrreducible(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("LLN limit undefined: {0}")]
    LlnUndefined(String),

    #[error("pair outside the required constraint set: {0}")]
    Membership(String),

    #[error("test pair outside the admissible set: {0}")]
    NotAdmissible(String),

    #[error("numerical non-convergence: {0}")]
    NonConvergence(String),

    #[error("infinite normalizer: {0}")]
    InfiniteNormalizer(String),

    #[error("sampler acceptance rate {rate:.3e} below 1e-3 for state {state}")]
    LowAcceptance { state: String, rate: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
