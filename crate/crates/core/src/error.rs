//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes; names the operation and both offenders.
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid model configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Operation not defined for this model variant.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// On-disk data did not match the expected format.
    #[error("format error in {path}{}: {msg}", offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Format {
        path: PathBuf,
        offset: Option<u64>,
        msg: String,
    },

    /// Semantically invalid dataset (empty, bad label range, ...).
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Linear solver failure.
    #[error("solver error: {0}")]
    Solver(String),

    /// Training produced a non-finite loss.
    #[error("diverged at step {step}: loss is not finite")]
    Diverged { step: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
