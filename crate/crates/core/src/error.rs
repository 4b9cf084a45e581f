use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit. The `Display` strings start with the
/// stable error code so CLI output and logs can be grepped reliably.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid-params: {0}")]
    InvalidParams(String),

    #[error("invalid-spec: {0}")]
    InvalidSpec(String),

    #[error("resample-unsupported: cannot resample dt={from} s to dt={to} s")]
    ResampleUnsupported { from: f64, to: f64 },

    #[error("singular-aif: arterial input function is identically zero")]
    SingularAif,

    #[error("invalid-alpha: alpha={0} must exceed 1")]
    InvalidAlpha(f64),

    #[error("aif-pretrain-diverged: loss became non-finite at iteration {0}")]
    AifPretrainDiverged(usize),

    #[error("train-diverged: {0}")]
    TrainDiverged(String),

    #[error("degenerate-roi: {0}")]
    DegenerateRoi(String),

    #[error("no-samples: coverage requires at least one sample")]
    NoSamples,

    #[error("no-ground-truth: bundle at {0} has no gt/ directory")]
    NoGroundTruth(PathBuf),

    #[error("shape-mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bundle-format: {path}: {reason}")]
    BundleFormat { path: PathBuf, reason: String },

    #[error("output-exists: {0} is not empty (use --force to overwrite)")]
    OutputExists(PathBuf),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
