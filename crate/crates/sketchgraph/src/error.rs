use thiserror::Error;

/// Library-wide error type. The CLI maps variants onto process exit codes:
/// bad input -> 2, incompatible artifact -> 3, everything else -> 1.
#[derive(Debug, Error)]
pub enum SgError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("bad input: {0}")]
    BadInput(String),

    #[error("incompatible artifact: {0}")]
    Incompatible(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Runtime(String),
}

pub type SgResult<T> = Result<T, SgError>;

impl SgError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        SgError::Io { path: path.into(), source }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        SgError::Shape { op, detail: detail.into() }
    }

    /// Exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            SgError::BadInput(_) | SgError::Shape { .. } => 2,
            SgError::Incompatible(_) => 3,
            _ => 1,
        }
    }
}
