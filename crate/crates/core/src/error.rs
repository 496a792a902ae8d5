use std::path::PathBuf;

use crate::world::{CubeletIndex, GridShape};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cubelet {index} is out of bounds for grid {shape}")]
    OutOfBounds { index: CubeletIndex, shape: GridShape },

    #[error("point #{row} ({x}, {y}, {z}) lies outside the world extent")]
    PointOutOfExtent { row: usize, x: f64, y: f64, z: f64 },

    #[error("resolution {fine} does not nest inside {coarse}; re-voxelize from the raw points instead")]
    NonNesting { fine: String, coarse: String },

    #[error("sequence of {len} frames is too short: need at least t1 + t2 = {required}")]
    TooFewFrames { len: usize, required: usize },

    #[error("could not place {placed} of {requested} boids outside terrain after {attempts} attempts")]
    Placement {
        placed: usize,
        requested: usize,
        attempts: usize,
    },

    #[error("no cubelet is ever occupied; the graph would be empty")]
    EmptyGraph,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
