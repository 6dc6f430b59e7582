use std::path::{Path, PathBuf};

use serde_json::json;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] memos_core::Error),
    #[error("cannot load sample `{sample}`: {message}")]
    Load { sample: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("missing {path}; run `memos {command}` first")]
    Dependency { command: String, path: PathBuf },
    #[error("{path} was built from a different config (hash {found}, expected {expected}); rerun `memos {command}`")]
    Stale { command: String, path: PathBuf, expected: String, found: String },
}

impl LabError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        LabError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, message: impl ToString) -> Self {
        LabError::Format { path: path.to_path_buf(), message: message.to_string() }
    }

    pub fn dependency(command: &str, path: &Path) -> Self {
        LabError::Dependency { command: command.into(), path: path.to_path_buf() }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            LabError::Core(e) => match e {
                memos_core::Error::Config(_) => "config",
                memos_core::Error::Shape(_) => "shape",
                memos_core::Error::Numeric(_) => "numeric",
                memos_core::Error::Validation { .. } => "validation",
                memos_core::Error::Training { .. } => "training",
                memos_core::Error::DegenerateBatch(_) => "degenerate_batch",
                memos_core::Error::MetricUndefined(_) => "metric_undefined",
                memos_core::Error::Compatibility(_) => "compatibility",
            },
            LabError::Load { .. } => "load",
            LabError::Io { .. } => "io",
            LabError::Format { .. } => "format",
            LabError::Config(_) => "config",
            LabError::Dependency { .. } => "dependency",
            LabError::Stale { .. } => "stale",
        }
    }

    /// The JSON object printed on stderr by the CLI.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = json!({ "error": { "kind": self.kind(), "message": self.to_string() } });
        if let LabError::Dependency { command, .. } | LabError::Stale { command, .. } = self {
            v["error"]["required_command"] = json!(command);
        }
        v
    }
}
