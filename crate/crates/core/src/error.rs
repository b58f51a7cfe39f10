use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: usize,
        got: usize,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value at coordinate {index} ({context})")]
    NonFinite { index: usize, context: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated input: needed {needed} bytes, {available} available ({context})")]
    Length {
        needed: usize,
        available: usize,
        context: String,
    },

    #[error("inconsistent input: {0}")]
    Consistency(String),

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("no valid marker position for sample {sample} after {attempts} attempts")]
    Placement { sample: usize, attempts: usize },

    #[error("degenerate map: {0}")]
    DegenerateMap(String),

    #[error("undefined region: {0}")]
    UndefinedRegion(String),

    #[error("insufficient data: {0}")]
    Size(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Training { epoch: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing upstream artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("run with seed {seed} failed: {source}")]
    Seeded {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(
        op: &'static str,
        axis: impl Into<String>,
        expected: usize,
        got: usize,
    ) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
            expected,
            got,
        }
    }

    /// Process exit code: 2 for bad or missing inputs, 1 for contract failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format(_)
            | Error::Length { .. }
            | Error::Consistency(_)
            | Error::Checksum { .. }
            | Error::Io { .. }
            | Error::MissingArtifact(_)
            | Error::Config(_)
            | Error::Json(_) => 2,
            Error::Seeded { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
