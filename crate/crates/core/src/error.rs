use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("clip has {samples} samples, shorter than one window of {win_len}")]
    ClipTooShort { samples: usize, win_len: usize },

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("unmapped source labels: {}", .0.join(", "))]
    UnmappedLabels(Vec<String>),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("stale cache at {}: config hash differs", .0.display())]
    StaleCache(PathBuf),

    #[error("bad container {}: {reason}", .path.display())]
    Container { path: PathBuf, reason: String },

    #[error("non-finite loss at step {step} (clips: {})", .clips.join(", "))]
    NonFiniteLoss { step: u64, clips: Vec<String> },

    #[error("{0}")]
    Ingest(String),

    #[error("io error on {}: {source}", .path.display())]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error("toml: {0}")]
    Toml(String),

    #[error("plot: {0}")]
    Plot(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Path {
            path: path.into(),
            source,
        }
    }
}
