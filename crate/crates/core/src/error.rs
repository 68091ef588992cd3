use std::path::PathBuf;

use madan_nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum MadanError {
    #[error("{context}: {path}: {source}")]
    Io {
        context: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{what} out of range: {detail}")]
    Range { what: &'static str, detail: String },
    #[error("integrity error in {path}: {detail}")]
    Integrity { path: PathBuf, detail: String },
    #[error("malformed {what} {path}: {detail}")]
    Format {
        what: &'static str,
        path: PathBuf,
        detail: String,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss term `{0}`")]
    NonFinite(String),
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("{context}: {source}")]
    Stage {
        context: String,
        #[source]
        source: Box<MadanError>,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, MadanError>;

impl MadanError {
    pub(crate) fn io(context: &'static str, path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            context,
            path: path.into(),
            source,
        }
    }

    pub(crate) fn range(what: &'static str, detail: impl Into<String>) -> Self {
        Self::Range {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn integrity(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Self::Integrity {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn format(what: &'static str, path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Self::Format {
            what,
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Wraps an error with the stage/epoch it happened in.
    pub fn in_stage(self, context: impl Into<String>) -> Self {
        Self::Stage {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
