use std::path::PathBuf;

use thiserror::Error;

use crate::domain::RoadPriority;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("observation references unknown segment `{0}`")]
    UnknownSegment(String),

    #[error("dataset mixes priorities: expected {expected}, segment `{segment}` is {found}")]
    MixedPriority {
        expected: RoadPriority,
        found: RoadPriority,
        segment: String,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("insufficient date span: {required} weeks required, {available} available")]
    InsufficientSpan { required: u32, available: u32 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("feature layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("too few samples: {needed} needed, {got} available")]
    TooFewSamples { needed: usize, got: usize },

    #[error("priority mismatch: model is {model}, dataset is {data}")]
    PriorityMismatch {
        model: RoadPriority,
        data: RoadPriority,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
