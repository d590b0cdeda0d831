use std::io;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    Shape {
        op: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("matrix of shape {rows}x{cols} is not full row rank")]
    RankDeficient { rows: usize, cols: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("training diverged at iteration {iter}: {detail}")]
    Diverged { iter: usize, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: impl Into<String>, expected: &[usize], got: &[usize]) -> Self {
        Error::Shape {
            op: op.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    /// True for failures caused by the numbers themselves rather than by
    /// the caller's inputs or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::Diverged { .. } | Error::RankDeficient { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
