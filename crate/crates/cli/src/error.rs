// SPDX-License-Identifier: MIT OR Apache-2.0

use serde_json::json;
use thiserror::Error;

use crp_core::CrpError;

/// Exit code for bad invocations.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for unreadable or invalid files.
pub const EXIT_FORMAT: i32 = 3;
/// Exit code for failures while computing.
pub const EXIT_COMPUTE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Core(#[from] CrpError),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) if e.is_format_error() || matches!(e, CrpError::Io(_)) => EXIT_FORMAT,
            CliError::Core(_) => EXIT_COMPUTE,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            EXIT_USAGE => "usage",
            EXIT_FORMAT => "format",
            _ => "compute",
        }
    }

    /// Structured form printed on stderr.
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "error": {
                "kind": self.kind(),
                "code": self.exit_code(),
                "message": self.to_string(),
            }
        })
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
