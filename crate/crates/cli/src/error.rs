use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid config, override or flag.
    #[error("{0}")]
    Schema(String),

    /// A file or artifact a stage depends on does not exist.
    #[error("missing prerequisite: {}", .0.display())]
    Missing(PathBuf),

    #[error(transparent)]
    Core(atop_core::Error),

    #[error("{0}")]
    Runtime(String),
}

impl From<atop_core::Error> for CliError {
    fn from(e: atop_core::Error) -> Self {
        match e {
            atop_core::Error::MissingPath(p) => CliError::Missing(p),
            atop_core::Error::InvalidConfig(m) => CliError::Schema(m),
            e => CliError::Core(e),
        }
    }
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Core(_) | CliError::Runtime(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Schema(_) => "schema",
            CliError::Missing(_) => "missing_prerequisite",
            CliError::Core(_) | CliError::Runtime(_) => "runtime",
        }
    }

    /// One-line JSON record printed to stderr and saved as `error.json`.
    pub fn record(&self, command: &str) -> serde_json::Value {
        let path = match self {
            CliError::Missing(p) => Some(p.display().to_string()),
            _ => None,
        };
        json!({
            "status": "error",
            "command": command,
            "kind": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
            "path": path,
        })
    }
}
