use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("map of shape {height}x{width} is too small, need at least {min}x{min}")]
    ShapeTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },
    #[error("invalid target dimension {height}x{width}")]
    InvalidDimension { height: usize, width: usize },
    #[error("crop {out_h}x{out_w} is larger than input {height}x{width}")]
    CropTooLarge {
        out_h: usize,
        out_w: usize,
        height: usize,
        width: usize,
    },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("alpha must be positive, got {0}")]
    NonPositiveAlpha(f64),
    #[error("no valid pixels")]
    NoValidPixels,
    #[error("invalid depth map: {0}")]
    InvalidDepth(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("grid size m={m} does not fit a {height}x{width} map")]
    GridTooLarge { m: usize, height: usize, width: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("infeasible scene: {0}")]
    InfeasibleScene(String),
    #[error("invalid preprocessing spec: {0}")]
    InvalidSpec(String),
    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("image {image:?} and depth {depth:?} dimensions differ")]
    DimensionMismatch {
        image: (usize, usize),
        depth: (usize, usize),
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
