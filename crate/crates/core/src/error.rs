use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op}: expected rank {expected}, got {got}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: dimension `{dim}` mismatch (expected {expected}, got {got})")]
    ShapeMismatch {
        op: &'static str,
        dim: String,
        expected: usize,
        got: usize,
    },

    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("loss must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("graph node {node} references later node {input}")]
    GraphOrder { node: usize, input: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("{what}: bad magic {found:?} (expected {expected:?})")]
    BadMagic {
        what: &'static str,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{what}: unsupported format version {found} (expected {expected})")]
    UnsupportedVersion {
        what: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("{what}: truncated file")]
    Truncated { what: &'static str },

    #[error("{what}: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum {
        what: &'static str,
        stored: u32,
        computed: u32,
    },

    #[error("{what}: malformed file: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("checkpoint incompatible with model: {0}")]
    Incompatible(String),

    #[error("could not place {kind} after {attempts} attempts; reduce object counts or radii")]
    Placement { kind: &'static str, attempts: usize },

    #[error("dataset {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged { epoch: usize, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        dim: impl Into<String>,
        expected: usize,
        got: usize,
    ) -> Self {
        Error::ShapeMismatch {
            op,
            dim: dim.into(),
            expected,
            got,
        }
    }

    pub(crate) fn arg(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }
}
