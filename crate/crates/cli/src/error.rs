use std::path::Path;

use bilab_core::LabError;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at '{field}': {message}")]
    Schema { field: String, message: String },

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("{0}")]
    Runtime(String),
}

/// Machine-readable form written to stderr and `error.json`.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    pub fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Schema {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn report(&self) -> ErrorReport {
        let (kind, field, message) = match self {
            CliError::Schema { field, message } => ("schema", Some(field.clone()), message.clone()),
            CliError::Numerical(m) => ("numerical", None, m.clone()),
            CliError::Runtime(m) => ("runtime", None, m.clone()),
        };
        ErrorReport {
            kind,
            field,
            message,
            exit_code: self.exit_code(),
        }
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Numerical(m) => CliError::Numerical(m),
            LabError::RejectionExhausted { .. } => CliError::Numerical(e.to_string()),
            // Argument errors from the core trace back to config values.
            LabError::InvalidArgument(m) | LabError::DistributionSupport(m) => CliError::schema("", m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
