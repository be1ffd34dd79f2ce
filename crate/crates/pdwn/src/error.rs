use thiserror::Error;

/// Errors surfaced by the library. CLI exit codes map `Usage`-class errors
/// (config, pnm, checkpoint, io) to 1 and `Numeric` to 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("pnm error: {0}")]
    Pnm(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
