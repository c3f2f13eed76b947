use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MoonError {
    /// A function was called with arguments outside its contract
    /// (shape mismatch, non-finite input, too-small batch).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("volume format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("cannot split dataset: {0}")]
    Split(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("input volume {dims:?} is smaller than the cumulative encoder stride {stride:?}")]
    InputTooSmall { dims: [usize; 3], stride: [usize; 3] },

    #[error("AUC is undefined: labels contain a single class")]
    UndefinedAuc,

    #[error("non-finite training loss at epoch {epoch}, batch {batch} (cases {cases:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        cases: Vec<String>,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = MoonError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> MoonError {
    let path = path.into();
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            MoonError::MissingFile(path)
        } else {
            MoonError::Io { path, source }
        }
    }
}

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::MoonError::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
