use crate::heightfield::tiff::TiffError;
use crate::heightfield::DefectLabel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("TIFF format error: {0}")]
    Tiff(#[from] TiffError),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("stratification error: label `{label}` has {available} items, at least {required} required")]
    Stratification {
        label: DefectLabel,
        available: usize,
        required: usize,
    },

    #[error("balance error: label `{label}` has {available} items, {requested} requested")]
    Balance {
        label: DefectLabel,
        available: usize,
        requested: usize,
    },

    #[error("ladder error: {0}")]
    Ladder(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("learner error: {0}")]
    Learner(String),

    #[error("scheduler protocol error: {0}")]
    Scheduler(String),

    #[error("trainer protocol error: {0}")]
    Protocol(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
