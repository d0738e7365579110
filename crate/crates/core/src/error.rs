use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Mismatched dimensions or an invalid setting; the message names the offending values.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("graph already consumed by a backward pass; record a new forward first")]
    GraphConsumed,

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("placement infeasible: {0}")]
    Placement(String),

    #[error("training diverged at step {step}; last finite parameters are attached")]
    Diverged {
        step: usize,
        checkpoint: Box<crate::networks::NetworkParams>,
    },

    #[error("attack aborted after {failures} consecutive non-finite steps")]
    AttackAborted { failures: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),

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
}

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Config(format!($($arg)*))
    };
}
pub(crate) use config_err;
