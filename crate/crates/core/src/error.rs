use thiserror::Error;

/// Errors raised by the reconstruction toolkit.
#[derive(Debug, Error)]
pub enum LqerError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("SVD did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("dead calibration channel {channel}: mean activation magnitude is {value}")]
    DeadChannel { channel: usize, value: f64 },

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LqerError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        LqerError::Shape(msg.into())
    }

    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        LqerError::Argument(msg.into())
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        LqerError::Format {
            offset,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, LqerError>;
