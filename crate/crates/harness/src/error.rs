use std::path::PathBuf;

use serde_json::json;
use thiserror::Error;

use crate::idx::IdxError;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] mutattack_core::Error),
    #[error(transparent)]
    Dataset(#[from] IdxError),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("json output failed: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid plan: {0}")]
    Plan(String),
}

impl HarnessError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Core(_) => "core",
            Self::Dataset(_) => "dataset",
            Self::Io { .. } => "io",
            Self::Csv(_) => "csv",
            Self::Json(_) => "json",
            Self::Plan(_) => "plan",
        }
    }

    /// One-line JSON description for scripts driving the CLI.
    pub fn to_json_line(&self) -> String {
        json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

pub(crate) fn io_error(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
