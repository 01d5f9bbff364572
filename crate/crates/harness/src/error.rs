use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite { epoch: usize, step: usize, detail: String },
    #[error("checkpoint {path} was written for a different configuration or code version (stored {stored}, expected {expected}); pass --force to load anyway")]
    HashMismatch { path: PathBuf, stored: String, expected: String },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] riskseg_core::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl HarnessError {
    /// Process exit code for each error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) => 3,
            HarnessError::NonFinite { .. } => 4,
            HarnessError::HashMismatch { .. } => 5,
            HarnessError::Checkpoint { .. } => 6,
            HarnessError::Io { .. } => 7,
            HarnessError::Core(riskseg_core::Error::Config(_)) => 2,
            HarnessError::Core(riskseg_core::Error::NonFinite { .. }) => 4,
            HarnessError::Core(riskseg_core::Error::Unsatisfiable { .. }) => 3,
            HarnessError::Core(_) | HarnessError::Tensor(_) => 8,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
