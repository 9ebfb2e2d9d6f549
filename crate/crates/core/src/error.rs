use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input files.
    #[error("input error: {0}")]
    Input(String),
    /// An operation was called outside its domain (wrong tree node, bad parameter range).
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("metric error: {0}")]
    Metric(String),
    /// Oracle transport failure or missing data for the mock backend.
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error("parse error: {0}")]
    Parse(String),
    /// A structural invariant was violated after an update.
    #[error("internal error: {0}")]
    Internal(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
