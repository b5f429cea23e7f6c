use std::fmt;
use std::path::Path;

pub type CliResult<T> = Result<T, CliError>;

/// Failures split by exit status: bad input (1) or numerical breakdown (2).
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Invalid(String),
    Numerical(String),
}

impl CliError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CliError::Invalid(msg.into())
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Invalid(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(m) => write!(f, "error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<dsatrack_core::Error> for CliError {
    fn from(e: dsatrack_core::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Invalid(e.to_string())
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Invalid(format!("json: {e}"))
    }
}
