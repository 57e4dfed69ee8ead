//! Scenario runner and report generator for the vaultlab simulator.

pub mod config;
pub mod matrix;
pub mod run;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{Expectation, ScenarioConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error(transparent)]
    Threat(#[from] vaultlab::threat::ThreatError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("expectation mismatch: {0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Mismatch(_) => 2,
            _ => 1,
        }
    }
}

/// Reads a config from a path, or from the bundled set when no such file
/// exists and the name matches.
pub fn load_config(arg: &str) -> Result<ScenarioConfig, CliError> {
    let path = Path::new(arg);
    let text = match std::fs::read_to_string(path) {
        Ok(text) => text,
        Err(e) => match config::bundled(arg.trim_end_matches(".json")) {
            Some(text) => text.to_string(),
            None => return Err(CliError::Io { path: path.into(), source: e }),
        },
    };
    ScenarioConfig::parse(&text)
}

pub fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.into(), source })?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| CliError::Io { path, source })
}
