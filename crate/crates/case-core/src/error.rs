use thiserror::Error;

pub type Result<T> = std::result::Result<T, CaseError>;

/// Unified error type. The CLI maps [`CaseError::Config`] to exit code 2 and
/// everything else to exit code 1.
#[derive(Debug, Error)]
pub enum CaseError {
    /// Bad configuration: unknown keys, invalid values, missing columns,
    /// inconsistent model dimensions.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or unusable input data (rows, files, checkpoints).
    #[error("data error: {0}")]
    Data(String),

    /// A numeric operation produced a non-finite value.
    #[error("non-finite value in `{op}`: {detail}")]
    NonFinite { op: &'static str, detail: String },

    /// Training diverged or was otherwise aborted.
    #[error("training aborted: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CaseError {
    pub fn config(msg: impl Into<String>) -> Self {
        CaseError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CaseError::Data(msg.into())
    }

    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CaseError::Config(_) => 2,
            _ => 1,
        }
    }
}
