use thiserror::Error;

/// Errors raised anywhere in the grounding lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("softmax row {row} has every entry masked")]
    DegenerateRow { row: usize },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("placement failed: {0}")]
    Placement(String),
    #[error("noise schedule: {0}")]
    Schedule(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::State(_) | Error::Io(_) | Error::Format(_) | Error::Json(_) => 3,
            Error::NonFinite(_) | Error::Training(_) | Error::DegenerateRow { .. } => 4,
            Error::Dimension { .. } | Error::Placement(_) | Error::Schedule(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
