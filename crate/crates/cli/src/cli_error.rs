//! Error-to-exit-code mapping: 1 = a check failed, 2 = usage/config error,
//! 3 = numeric failure.

use compose_core::CoreError;

#[derive(Debug)]
pub enum CliError {
    /// Exit 1: an embedded invariant check failed.
    Check(String),
    /// Exit 2: bad flags, unreadable files, invalid configuration.
    Usage(String),
    /// Exit 3: the computation blew up numerically.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Check(m) | CliError::Usage(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match &e {
            CoreError::NonFinite { .. }
            | CoreError::DegenerateVector { .. }
            | CoreError::NotSymmetric(_)
            | CoreError::EmptyAfterCentering => CliError::Numeric(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<String> for CliError {
    fn from(msg: String) -> Self {
        CliError::Usage(msg)
    }
}
