//! The `bifair` pipeline: synthesize a world, preprocess it, train, evaluate
//! and compare methods. Each command reads one [`RunConfig`].

pub mod commands;
pub mod config;

use std::fmt;

pub use config::{GroupingKind, Method, RunConfig};

/// A failed command: exit status 2 for configuration and validation errors,
/// 1 for everything else.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "config",
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            kind: "runtime",
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.message, "kind": self.kind, "code": self.code }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<bifair::Error> for CliError {
    fn from(e: bifair::Error) -> Self {
        match e {
            bifair::Error::Config(msg) => CliError::config(msg),
            other => CliError::runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::runtime(e.to_string())
    }
}
