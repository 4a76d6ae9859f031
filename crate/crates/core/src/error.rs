use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("invalid label set: {0}")]
    LabelSet(String),

    #[error("split: {0}")]
    Split(String),

    #[error("wav: {0}")]
    Wav(String),

    #[error("unsupported audio codec: {0}")]
    UnsupportedCodec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid probability distribution: {0}")]
    Distribution(String),

    #[error("predictions: {0}")]
    Predictions(String),

    #[error("id sets differ; symmetric difference: {}", .ids.join(", "))]
    IdMismatch { ids: Vec<String> },

    #[error("fusion: {0}")]
    Fusion(String),

    #[error("metrics: {0}")]
    Metric(String),

    #[error("unsupported schema version {found:?} (expected {expected:?})")]
    SchemaVersion { expected: String, found: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn csv(context: impl Into<String>, source: csv::Error) -> Self {
        Error::Csv {
            context: context.into(),
            source,
        }
    }
}
