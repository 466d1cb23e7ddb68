use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),

    #[error("non-finite coefficient at t={t}, x={x:?}")]
    CoefficientEvaluation { t: f64, x: Vec<f64> },

    #[error("non-finite value while evaluating {what} at t={t}, x={x:?}")]
    Evaluation { what: String, t: f64, x: Vec<f64> },

    #[error("matrix is not positive definite: leading minor {minor} has pivot {pivot}")]
    Factorization { minor: usize, pivot: f64 },

    #[error("certification failed: {0}")]
    Certification(String),

    #[error("simulation failed: {0}")]
    Simulation(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::ParameterDomain(msg.into())
    }
}
