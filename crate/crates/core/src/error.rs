use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("min-max membership is undefined on a constant image (all pixels = {value})")]
    ConstantImage { value: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mu + nu = {sum} exceeds 1 at pixel {index}")]
    ConstraintViolation { index: usize, sum: f64 },

    #[error("value {value} at index {index} lies outside [0, 1]")]
    OutOfUnitRange { index: usize, value: f64 },

    #[error("histogram needs at least one bin")]
    InvalidBins,

    #[error("spatial dims {height}x{width} are not even")]
    OddSpatialDim { height: usize, width: usize },

    #[error("dropout probability {0} outside [0, 1)")]
    InvalidP(f64),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

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
