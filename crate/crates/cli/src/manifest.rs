use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

/// Provenance embedded in every artifact. Rerunning `args` reproduces the
/// artifact byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_paths: Vec<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub tool_version: String,
    /// Taken from `SOURCE_DATE_EPOCH` when set, otherwise omitted so that
    /// reruns stay identical.
    pub timestamp: Option<String>,
}

impl RunManifest {
    pub fn new(command: &str, args: &[String]) -> Self {
        RunManifest {
            command: command.to_string(),
            args: args.to_vec(),
            config_paths: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: std::env::var("SOURCE_DATE_EPOCH").ok(),
        }
    }
}

/// Writes `value` with a `manifest` key merged in.
pub fn write_json_with_manifest<T: Serialize>(path: &Path, value: &T, manifest: &RunManifest) -> CliResult<()> {
    let mut v = serde_json::to_value(value).map_err(|e| CliError::write(path, e))?;
    match &mut v {
        Value::Object(map) => {
            map.insert(
                "manifest".into(),
                serde_json::to_value(manifest).map_err(|e| CliError::write(path, e))?,
            );
        }
        _ => unreachable!("artifacts serialize as objects"),
    }
    write_text(path, &(serde_json::to_string_pretty(&v).unwrap() + "\n"))
}

/// Sidecar manifest for CSV artifacts: `<file>.manifest.json`.
pub fn write_sidecar(path: &Path, manifest: &RunManifest) -> CliResult<()> {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    let side = path.with_file_name(name);
    write_text(&side, &(serde_json::to_string_pretty(manifest).unwrap() + "\n"))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::write(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::write(path, e))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::read(path, e))
}
