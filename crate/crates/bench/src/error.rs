use mampc_core::MampcError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    /// Bad or inconsistent configuration; `key` points at the offending entry.
    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error(transparent)]
    Core(#[from] MampcError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("repeated runs disagree: {0}")]
    Nondeterministic(String),
    #[error("gate failed: {0}")]
    Gate(String),
}

impl BenchError {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        BenchError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        BenchError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit code: 1 validation, 2 runtime, 3 gate.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config { .. } => 1,
            BenchError::Core(MampcError::InvalidParameter { .. })
            | BenchError::Core(MampcError::UnknownPlant(_))
            | BenchError::Core(MampcError::InvalidBox(_))
            | BenchError::Core(MampcError::DimensionMismatch { .. }) => 1,
            BenchError::Gate(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
