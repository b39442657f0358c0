use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("track generation failed for seed {seed} after {attempts} attempts: {reason}")]
    TrackGeneration {
        seed: u64,
        attempts: usize,
        reason: String,
    },

    #[error("non-finite {what} passed to the vehicle model")]
    NonFinite { what: &'static str },

    #[error("demonstration too short: {len} steps, need at least {min}")]
    DemoTooShort { len: usize, min: usize },

    #[error("timestamps must be strictly increasing (row {row})")]
    NonMonotoneTime { row: usize },

    #[error("singular normal equations; use a ridge factor epsilon > 0")]
    SingularSystem,

    #[error("covariance is not positive definite after regularization")]
    NotPositiveDefinite,

    #[error("clothoid fit did not converge after {iterations} iterations")]
    ClothoidNoConvergence { iterations: usize },

    #[error("clothoid {which} failed: {source}")]
    LocalPath {
        which: u8,
        #[source]
        source: Box<Error>,
    },

    #[error("arc length {s} outside clothoid range [0, {length}]")]
    ArcOutOfRange { s: f64, length: f64 },

    #[error("too many dropped samples while building the dataset: {dropped} of {total}")]
    TooManyDrops { dropped: usize, total: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize },

    #[error("car is {distance:.1} m from the line; the expert is undefined there")]
    ExpertUndefined { distance: f64 },

    #[error("lap not finished")]
    Unfinished,

    #[error("no qualifying interval for the aggressiveness metric")]
    NoQualifyingInterval,

    #[error("statistic undefined: {0}")]
    Undefined(&'static str),

    #[error("model has no target trajectory for track {0}")]
    UnknownTrack(u64),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("schema mismatch in {path}: expected {expected:?}, found {found:?}")]
    Schema {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
