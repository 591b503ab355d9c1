use std::path::PathBuf;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("EDF header truncated: need {needed} bytes, have {available}")]
    EdfTruncated { needed: usize, available: usize },

    #[error("EDF field `{field}` is not a valid number: {value:?}")]
    EdfField { field: String, value: String },

    #[error("channel `{requested}` not found; available channels: {}", available.join(", "))]
    ChannelNotFound {
        requested: String,
        available: Vec<String>,
    },

    #[error("unrecognized stage label `{0}`")]
    UnknownStage(String),

    #[error("recording contains no sleep epochs (all wake)")]
    AllWake,

    #[error("unsupported resampling from {from} Hz to 100 Hz (only integer decimation)")]
    UnsupportedRate { from: f64 },

    #[error("raw signal file has bad magic or header")]
    RawFormat,

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("checkpoint does not match architecture:\n{}", diffs.join("\n"))]
    CheckpointMismatch { diffs: Vec<String> },

    #[error("config error at `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("empty dataset: {0}")]
    EmptyData(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Csv(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
