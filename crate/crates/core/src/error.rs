use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the re-ranking pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("item {0} is not in the catalog")]
    MissingItem(u64),

    #[error(
        "instance too large for exhaustive enumeration ({combinations} combinations > {limit}); use branch-and-bound"
    )]
    InstanceTooLarge { combinations: u128, limit: u128 },

    #[error("solver budget exhausted before any feasible solution was found")]
    NoIncumbent,

    #[error("solver budget exhausted for {users} user(s) in strict mode")]
    BudgetExhausted { users: usize },

    #[error("user {user}: {source}")]
    User {
        user: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn parse(path: &std::path::Path, line: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    /// True when the underlying cause is a caller mistake rather than bad data.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::InvalidArgument(_) => true,
            Error::User { source, .. } | Error::Stage { source, .. } => source.is_usage(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
