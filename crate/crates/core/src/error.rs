use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("region size {0} is below the minimum of 16 pixels")]
    RegionTooSmall(usize),
    #[error("invalid bounds: lower {lower} must be below upper {upper}")]
    InvalidBounds { lower: f64, upper: f64 },
    #[error("filter count {0} must be even and positive")]
    FilterCount(usize),
    #[error("expected a {expected}x{expected} region, got {got} pixels")]
    RegionSizeMismatch { expected: usize, got: usize },
    #[error("need at least 2 quantization levels, got {0}")]
    LevelCount(usize),
    #[error("intensity map has zero range")]
    DegenerateMap,
    #[error("{stats} statistical features for {specs} filters")]
    CountMismatch { stats: usize, specs: usize },
    #[error("{channels} channels cannot be split over {heads} heads")]
    HeadSplit { channels: usize, heads: usize },
    #[error("feature levels are not power-of-two aligned: {0:?}")]
    FpnAlignment(Vec<usize>),
    #[error("degenerate region box {0:?}")]
    DegenerateBox([f64; 4]),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
