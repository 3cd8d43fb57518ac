use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = WaveError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum WaveError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("stream alignment: {0}")]
    Alignment(String),

    #[error("capacity exceeded: sequence of {len} tokens, limit {max}")]
    Capacity { len: usize, max: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("no (task, source) group holds at least {batch_size} samples")]
    EmptyEpoch { batch_size: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl WaveError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        WaveError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        WaveError::Format {
            what,
            detail: detail.into(),
        }
    }
}
