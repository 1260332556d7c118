use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("degenerate geometry: all points coincide (max radius 0)")]
    DegenerateGeometry,

    #[error("invalid camera rig: {0}")]
    InvalidRig(String),

    #[error("crop size {size} exceeds image resolution {resolution}")]
    CropTooLarge { size: usize, resolution: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {context}")]
    NonFinite { context: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("PLY parse error in {path}: {message}")]
    Ply { path: PathBuf, message: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
