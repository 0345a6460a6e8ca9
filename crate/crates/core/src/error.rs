use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("dataset is empty after segmentation: no goal events found in any game")]
    EmptyDataset,

    #[error("sampling failed for game `{game_id}`: {reason}")]
    SamplingFailure { game_id: String, reason: String },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("checkpoint does not match encoder config: {0}")]
    CheckpointMismatch(String),

    #[error("report schema mismatch in {path}: {message}")]
    SchemaMismatch { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn sampling(game_id: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::SamplingFailure {
            game_id: game_id.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
