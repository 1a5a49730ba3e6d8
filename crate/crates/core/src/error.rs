use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("image contains no foreground pixels")]
    NoForeground,

    #[error("class '{class}' has {available} images but {required} are required")]
    Capacity {
        class: String,
        available: usize,
        required: usize,
    },

    #[error("invalid network configuration at layer '{layer}': {message}")]
    Config { layer: String, message: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint config digest {found:016x} does not match network digest {expected:016x}")]
    CheckpointDigest { found: u64, expected: u64 },

    #[error("checkpoint is truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint is corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("cannot transfer tensor '{tensor}': {message}")]
    Transfer { tensor: String, message: String },

    #[error("non-finite {what} at iteration {iteration} in '{layer}'")]
    NonFinite {
        what: &'static str,
        iteration: usize,
        layer: String,
    },

    #[error("batch stream ended: {0}")]
    StreamClosed(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ::image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
