//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with arguments that violate its contract.
    #[error("{op}: {details}")]
    Contract { op: &'static str, details: String },

    /// A non-finite value appeared where finite values are required.
    #[error("non-finite {what} for {name}")]
    NonFinite { what: &'static str, name: String },

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("data: {0}")]
    Data(#[from] DataError),

    /// Evaluation-protocol violation (query/gallery construction).
    #[error("protocol: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(op: &'static str, details: impl Into<String>) -> Self {
        Error::Contract {
            op,
            details: details.into(),
        }
    }
}

/// Returns a contract-violation error from the enclosing function when the
/// condition does not hold.
macro_rules! ensure_contract {
    ($cond:expr, $op:expr, $($fmt:tt)+) => {
        if !($cond) {
            return Err($crate::error::Error::contract($op, format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure_contract;

/// Checkpoint load failures. Every corruption mode gets its own variant so
/// callers can tell them apart.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes, expected \"SVR1\"")]
    BadMagic,

    #[error("file truncated while reading {context}")]
    Truncated { context: &'static str },

    #[error("checkpoint contains unknown parameter {name:?}")]
    UnknownName { name: String },

    #[error("checkpoint is missing parameter {name:?}")]
    MissingTensor { name: String },

    #[error("shape mismatch for {name:?}: checkpoint has {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unsupported dtype tag {tag} for {name:?}")]
    UnsupportedDtype { name: String, tag: u8 },

    #[error("duplicate parameter {name:?} in checkpoint")]
    DuplicateName { name: String },

    #[error("parameter name is not valid UTF-8")]
    BadName,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("directory {0:?} contains no images")]
    EmptyDirectory(PathBuf),

    #[error("unparseable dataset file name(s): {}", .0.join(", "))]
    BadFilenames(Vec<String>),

    #[error("cannot read image {path:?}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },

    #[error("no identity has images in both cameras; cannot sample positive pairs")]
    NoCrossCameraIdentity,
}
