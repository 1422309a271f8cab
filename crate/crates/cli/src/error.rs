use std::path::Path;

use myopia_core::ErrorClass;
use serde_json::json;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] myopia_core::Error),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            CliError::Usage(_) => ErrorClass::Usage,
            CliError::Data(_) => ErrorClass::Data,
            CliError::Core(e) => e.class(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.class() {
            ErrorClass::Usage => 1,
            ErrorClass::Data => 2,
            ErrorClass::Numerical => 3,
        }
    }

    /// One-line JSON object for stderr.
    pub fn to_json(&self) -> String {
        let kind = match self.class() {
            ErrorClass::Usage => "usage",
            ErrorClass::Data => "data",
            ErrorClass::Numerical => "numerical",
        };
        let mut v = json!({
            "error": kind,
            "code": self.exit_code(),
            "message": self.to_string(),
        });
        match self {
            CliError::Core(myopia_core::Error::Manifest { row, .. }) => v["row"] = json!(row),
            CliError::Core(myopia_core::Error::Divergence { epoch, batch, .. }) => {
                v["epoch"] = json!(epoch);
                v["batch"] = json!(batch);
            }
            _ => {}
        }
        v.to_string()
    }
}
