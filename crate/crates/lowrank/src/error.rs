use std::path::PathBuf;

use serde_json::json;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Config { field: String, reason: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error("checksum mismatch for {}: manifest records {expected}, content hashes to {actual}", path.display())]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("tensor `{name}` named in the manifest is missing from {}", path.display())]
    MissingTensor { path: PathBuf, name: String },
    #[error(transparent)]
    Numerical(#[from] lowrank_core::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Checksum { .. } => "checksum",
            Error::MissingTensor { .. } => "missing_tensor",
            Error::Numerical(lowrank_core::Error::InvalidConfig { .. })
            | Error::Numerical(lowrank_core::Error::BudgetTooSmall { .. }) => "config",
            Error::Numerical(_) => "numerical",
        }
    }

    /// 2 for configuration problems, 3 for anything touching files, 4 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" => 2,
            "numerical" => 4,
            _ => 3,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut body = json!({
            "kind": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        if let Error::Config { field, .. } = self {
            body["field"] = json!(field);
        }
        json!({ "error": body })
    }
}
