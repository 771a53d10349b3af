use std::path::PathBuf;

use desense_net::NetError;
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] desense_core::Error),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitClass {
    Success = 0,
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

impl CliError {
    pub fn exit_class(&self) -> ExitClass {
        match self {
            CliError::Usage(_) => ExitClass::Usage,
            CliError::Core(desense_core::Error::NonFiniteObjective(_)) => ExitClass::Numeric,
            CliError::Core(desense_core::Error::InvalidParameter(_)) => ExitClass::Usage,
            CliError::Net(e) if e.is_numeric() => ExitClass::Numeric,
            CliError::Net(NetError::InvalidConfig(_)) => ExitClass::Usage,
            CliError::Net(NetError::Core(desense_core::Error::InvalidParameter(_))) => {
                ExitClass::Usage
            }
            _ => ExitClass::Data,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
