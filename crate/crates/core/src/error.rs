use std::path::PathBuf;

/// Errors produced anywhere in the detector stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch in {dim}: {detail}")]
    Shape {
        op: &'static str,
        dim: String,
        detail: String,
    },
    #[error("non-finite value produced by node {node}")]
    NonFinite { node: String },
    #[error("{op}: index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("zero-norm feature vector at instance {instance} ({side}); cosine similarity undefined")]
    ZeroNorm { instance: usize, side: &'static str },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("scene generation failed: could not place {what} after {attempts} attempts; loosen `{field}`")]
    Placement {
        what: String,
        attempts: usize,
        field: &'static str,
    },
    #[error("{path}: {field}: {detail}")]
    Format {
        path: PathBuf,
        field: String,
        detail: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, dim: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            dim: dim.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            field: field.into(),
            detail: detail.into(),
        }
    }
}
