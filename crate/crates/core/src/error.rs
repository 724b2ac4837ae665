use thiserror::Error;

/// Unified error type for every fallible operation in this crate.
///
/// Variants are grouped by how the command-line tool maps them to exit
/// codes: configuration problems, data problems, and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    // configuration
    #[error("invalid config: {0}")]
    Config(String),

    // data and serialization
    #[error("degenerate dataset spec: {0}")]
    DegenerateSpec(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    // numerics
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
    #[error("batch too small for {op}: need at least {need}, got {got}")]
    BatchTooSmall {
        op: &'static str,
        need: usize,
        got: usize,
    },
    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),
    #[error("model architectures do not match: {0}")]
    ArchitectureMismatch(String),
    #[error("confidence threshold must be positive, got {0}")]
    NonPositiveConfidence(f64),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
