use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("coincident points: image-to-microphone distance {distance:e} m")]
    CoincidentPoints { distance: f64 },

    #[error("rank deficient: mode {mode} has sigma {sigma:e} below floor {floor:e}")]
    RankDeficient { mode: usize, sigma: f64, floor: f64 },

    #[error("numerical failure at {frequency} Hz: {message}")]
    Numerical { frequency: f64, message: String },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid-config",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::InvalidScene(_) => "invalid-scene",
            Error::CoincidentPoints { .. } => "coincident-points",
            Error::RankDeficient { .. } => "rank-deficient",
            Error::Numerical { .. } => "numerical-failure",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
