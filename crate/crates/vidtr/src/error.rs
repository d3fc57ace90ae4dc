//! Crate-wide error type. Every fallible operation reports enough context
//! to reconstruct what was asked of it.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two shapes that had to agree did not. `op` names the operation.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single bad argument (axis out of range, index too large, ...).
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    /// Rejected model or run configuration. Maps to a usage error (exit 2)
    /// in the command-line front end.
    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: corrupt header: {0}")]
    CorruptHeader(String),

    #[error("checkpoint: truncated while reading `{name}`")]
    Truncated { name: String },

    #[error("checkpoint: tensor `{name}` has shape {found:?}, expected {expected:?}")]
    CheckpointShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    /// Version or config block does not match what the loader can rebuild.
    #[error("checkpoint: {0}")]
    CheckpointMismatch(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Diverged { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit status for command-line use: 2 for config/usage
    /// problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}
