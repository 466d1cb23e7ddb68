use driftlab_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{0}")]
    Io(String),
}

impl CliError {
    /// 2 for usage, configuration and I/O problems, 3 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Core(e) => match e {
                CoreError::ParameterDomain(_) | CoreError::Configuration(_) | CoreError::Input(_) => 2,
                CoreError::Io(_) | CoreError::Csv(_) | CoreError::Json(_) => 2,
                CoreError::CoefficientEvaluation { .. }
                | CoreError::Evaluation { .. }
                | CoreError::Factorization { .. }
                | CoreError::Certification(_)
                | CoreError::Simulation(_) => 3,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
