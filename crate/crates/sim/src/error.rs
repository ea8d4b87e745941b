use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("config: invalid `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("config: {0}")]
    Parse(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] gfpl_core::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("sweep: {0}")]
    Sweep(String),
}

impl SimError {
    pub fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        SimError::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
