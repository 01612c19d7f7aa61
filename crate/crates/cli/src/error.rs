use cpt_core::CptError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input or an unmet precondition; exit code 2.
    #[error("{0}")]
    Precondition(String),

    /// Anything else; exit code 1.
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Precondition(_) => 2,
            CliError::Internal(_) => 1,
        }
    }

    pub fn io(context: &str, err: std::io::Error) -> Self {
        CliError::Precondition(format!("{context}: {err}"))
    }
}

impl From<CptError> for CliError {
    fn from(err: CptError) -> Self {
        match err {
            CptError::ConstructionTolerance { .. } | CptError::DegenerateSystem(_) | CptError::Calibration(_) => {
                CliError::Internal(err.to_string())
            }
            _ => CliError::Precondition(err.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
