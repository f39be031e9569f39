use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] drum_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{}: {source}", path.display())]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema violation in {file}, column {column:?}: {reason}")]
    Schema {
        file: String,
        column: String,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("incompatible manifests: {0}")]
    Incompatible(String),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }

    pub fn csv(path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> HarnessError {
        let path = path.into();
        move |source| HarnessError::Csv { path, source }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
