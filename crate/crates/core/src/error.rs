use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("singular geometry at cell ({i}, {j}): zero distance on a valid cell")]
    SingularGeometry { i: usize, j: usize },

    #[error("infinite variance at cell ({i}, {j}): zero SNR on a valid cell")]
    InfiniteVariance { i: usize, j: usize },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("reverse sampler diverged at step {step}")]
    Divergence { step: usize },

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("training diverged at step {step}")]
    TrainingDiverged { step: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("admissibility exhausted for scene {scene_id} after {attempts} attempts")]
    AdmissibilityExhausted { scene_id: u64, attempts: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
