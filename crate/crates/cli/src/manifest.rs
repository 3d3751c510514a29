//! `run_manifest.toml`, written once by every command into its output
//! directory.
//!
//! ```toml
//! command = "train"
//! args = ["acn", "train", "--data", "data", "--mask", "t1c"]
//! seed = 0
//! started = "2026-01-01T00:00:00+00:00"
//! finished = "2026-01-01T00:05:00+00:00"
//! outputs = ["best", "last", "metrics.csv"]
//! artifact_hash = "…"   # sha256 over the other files in the directory
//!
//! [config]              # resolved settings of the command
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use acn_core::data::dataset_hash;
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "run_manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<String>,
    pub artifact_hash: String,
    #[serde(default)]
    pub config: toml::Table,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Collects what a command did; [`Recorder::finish`] hashes the output
/// directory and writes the manifest.
#[derive(Debug)]
pub struct Recorder {
    command: String,
    args: Vec<String>,
    started: String,
}

impl Recorder {
    pub fn start(command: &str, args: &[String]) -> Self {
        Self {
            command: command.to_string(),
            args: args.to_vec(),
            started: now(),
        }
    }

    pub fn finish(self, dir: &Path, config: toml::Table, seed: Option<u64>, outputs: Vec<String>) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let manifest = RunManifest {
            command: self.command,
            args: self.args,
            seed,
            started: self.started,
            finished: now(),
            outputs,
            artifact_hash: dataset_hash(dir)?,
            config,
        };
        let path = dir.join(MANIFEST_FILE);
        let text = toml::to_string(&manifest).map_err(|e| CliError::Config(e.to_string()))?;
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

/// Serializes any config value into a TOML table.
pub(crate) fn table_of<T: Serialize>(value: &T) -> toml::Table {
    toml::Table::try_from(value).unwrap_or_default()
}
