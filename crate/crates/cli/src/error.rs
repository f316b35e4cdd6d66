use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("ordering error: {0}")]
    Ordering(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Ordering(_) => 3,
            CliError::Io(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<bridgekit::Error> for CliError {
    fn from(e: bridgekit::Error) -> Self {
        use bridgekit::Error as E;
        match e {
            E::Io(_) | E::Format(_) | E::Json(_) => CliError::Io(e.to_string()),
            E::Tensor(bridgekit_tensor::TensorError::Io(_))
            | E::Tensor(bridgekit_tensor::TensorError::Checkpoint(_)) => CliError::Io(e.to_string()),
            E::MissingCheckpoint(_) => CliError::Ordering(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<bridgekit_tensor::TensorError> for CliError {
    fn from(e: bridgekit_tensor::TensorError) -> Self {
        CliError::from(bridgekit::Error::from(e))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
