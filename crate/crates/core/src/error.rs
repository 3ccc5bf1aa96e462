use std::path::PathBuf;

/// Errors produced anywhere in the annotation engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Bad magic bytes, unsupported version, or unparsable text.
    #[error("format error: {0}")]
    Format(String),

    /// Counts, dimensions, or columns disagree with what the file declares.
    #[error("schema error: {0}")]
    Schema(String),

    /// A record is individually invalid (zero norm, non-finite entry, bad row).
    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// The experiment state does not allow the requested operation.
    #[error("state error: {0}")]
    State(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training error: {0}")]
    Training(String),

    /// A protocol round failed; wraps the underlying error with the round number.
    #[error("round {round}: {source}")]
    Round {
        round: usize,
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
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
