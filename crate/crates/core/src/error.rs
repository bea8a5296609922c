use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DncError>;

#[derive(Debug, Error)]
pub enum DncError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    /// A forward cache or mask set does not belong to the network it is used with.
    #[error("inconsistent cache or masks: {0}")]
    Consistency(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty dataset or batch")]
    EmptyData,

    #[error("training diverged at epoch {epoch} (learning rate {learning_rate})")]
    Diverged { epoch: usize, learning_rate: f64 },

    #[error("matrix is not positive definite even with jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },

    #[error("correlation undefined: variance at index {index} is {value}")]
    UndefinedCorrelation { index: usize, value: f64 },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DncError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DncError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            DncError::InvalidParameter(_) | DncError::Config(_) => 2,
            DncError::Diverged { .. }
            | DncError::Numeric(_)
            | DncError::NotPositiveDefinite { .. }
            | DncError::UndefinedCorrelation { .. } => 4,
            _ => 3,
        }
    }
}
