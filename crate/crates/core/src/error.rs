use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("insufficient frames: need at least {needed}, got {got}")]
    InsufficientFrames { needed: usize, got: usize },

    #[error("insufficient audio: need at least {needed} samples, got {got}")]
    InsufficientAudio { needed: usize, got: usize },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("window [{start_s}, {end_s}) s out of range: {message}")]
    Bounds {
        start_s: f64,
        end_s: f64,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported audio: {0}")]
    Audio(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("training diverged at step {step}: {message}")]
    Diverged { step: u64, message: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("incompatible: {0}")]
    Compatibility(String),

    #[error("checkpoint format (version {v} expected): {0}", v = crate::nn::checkpoint::VERSION)]
    Format(String),

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

    /// True for errors caused by the caller's input rather than by a failed
    /// computation or the environment. The CLI maps these to exit code 2.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Diverged { .. } | Error::State(_) | Error::Io { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
