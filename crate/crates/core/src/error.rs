use std::path::PathBuf;

/// Error type shared by all modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("tracking diverged at frame {frame}: {reason}")]
    TrackingDiverged { frame: usize, reason: String },

    #[error("mapping diverged: {0}")]
    MappingDiverged(String),

    #[error("invalid pose graph: {0}")]
    InvalidGraph(String),

    #[error("degenerate edge: densities are equal ({0})")]
    DegenerateEdge(f64),

    #[error("edge does not cross the threshold (s1 = {s1}, s2 = {s2}, tau = {tau})")]
    NotACrossing { s1: f64, s2: f64, tau: f64 },

    #[error("pose outside the scene room")]
    PoseOutsideRoom,

    #[error("dataset format error in {path}: {reason}")]
    DatasetFormat { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in {what}: {reason}")]
    Parse { what: String, reason: String },

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
}
