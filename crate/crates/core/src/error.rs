use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension { what: &'static str, expected: usize, got: usize },

    #[error("shot count {k} exceeds per-class budget {per_class}")]
    ShotCount { k: usize, per_class: usize },

    #[error("episode budget exceeded: {0}")]
    Budget(String),

    #[error("numerically degenerate system: {what} (lambda_min = {lambda_min:e})")]
    Degenerate { what: String, lambda_min: f64 },

    #[error("training diverged at epoch {epoch}: loss {loss} exceeds {limit}")]
    Divergence { epoch: usize, loss: f64, limit: f64 },

    #[error("checkpoint format error in {path:?}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
