use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("training: {0}")]
    Training(String),
    #[error("evaluation: {0}")]
    Evaluation(String),
    /// An artifact was produced under a different configuration or its
    /// bytes changed since it was recorded.
    #[error("provenance: {0}")]
    Provenance(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Training(_) => 4,
            CliError::Evaluation(_) => 5,
            CliError::Provenance(_) => 6,
        }
    }
}

impl From<eegdiff::Error> for CliError {
    fn from(e: eegdiff::Error) -> Self {
        use eegdiff::Error as E;
        match e {
            E::Config(m) => CliError::Config(m),
            E::Divergence { .. } => CliError::Training(e.to_string()),
            E::Eval(m) => CliError::Evaluation(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ndcore::NdError> for CliError {
    fn from(e: ndcore::NdError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
