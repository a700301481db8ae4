use std::path::PathBuf;

use ddad_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DdadError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("checkpoint holds a {found} backbone, expected {expected}")]
    KindMismatch { expected: String, found: String },
    #[error("ingestion error in {}: {message}", path.display())]
    Ingest { path: PathBuf, message: String },
    #[error("numerical error at epoch {epoch}, batch {batch}: {message}")]
    Numerical { epoch: usize, batch: usize, message: String },
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DdadError> = std::result::Result<T, E>;

impl DdadError {
    /// Short tag naming the subsystem that raised the error.
    pub fn module(&self) -> &'static str {
        match self {
            Self::Tensor(_) => "tensor",
            Self::Config(_) => "config",
            Self::Format { .. } | Self::KindMismatch { .. } => "checkpoint",
            Self::Ingest { .. } => "data",
            Self::Numerical { .. } => "trainer",
            Self::Eval(_) => "eval",
            Self::Contract(_) => "scoring",
            Self::Io(_) => "io",
        }
    }
}
