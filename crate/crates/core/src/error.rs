use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing buffer `{name}` at {path}")]
    MissingBuffer { name: String, path: PathBuf },

    #[error("dimension mismatch: expected {expected:?}, got {actual:?} ({context})")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
        context: String,
    },

    #[error("failed to decode {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("no entity found in prompt {prompt:?}")]
    NoEntityFound { prompt: String },

    #[error("user mask mode requires a user mask")]
    MissingUserMask,

    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("backend returned non-finite output at step {step}")]
    NonFiniteOutput { step: usize },

    #[error("mask has zero total weight")]
    ZeroMask,

    #[error("request timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("remote error: {0}")]
    Remote(String),

    #[error("chat client unavailable: {0}")]
    ClientUnavailable(String),

    #[error("unparseable agent response: {0}")]
    UnparseableResponse(String),

    #[error("no critique carried any suggestion")]
    EmptyCritiques,

    #[error("embedder unavailable: {0}")]
    EmbedderUnavailable(String),

    #[error("image too small: {width}x{height} for window {window}")]
    TooSmall {
        width: usize,
        height: usize,
        window: usize,
    },

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("non-positive input: {0}")]
    NonPositiveInput(f64),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    DivergenceDetected { epoch: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dims(
        expected: (usize, usize),
        actual: (usize, usize),
        context: impl Into<String>,
    ) -> Self {
        Error::DimensionMismatch {
            expected,
            actual,
            context: context.into(),
        }
    }
}
