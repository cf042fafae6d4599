use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Core(#[from] bsnet_core::Error),
    #[error("input {height}x{width} is smaller than the minimum {min}x{min}")]
    InputTooSmall { height: usize, width: usize, min: usize },
    #[error("expected {expected} channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("feature resolutions disagree: {0}")]
    ResolutionMismatch(String),
    #[error("pooling bins n = {n} exceed the {height}x{width} feature map")]
    BinTooLarge { n: usize, height: usize, width: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: {term} is not finite")]
    Diverged {
        epoch: usize,
        batch: usize,
        term: String,
    },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn checkpoint(path: &std::path::Path, reason: impl std::fmt::Display) -> Self {
        Error::Checkpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        }
    }
}
