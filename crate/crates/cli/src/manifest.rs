use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Record of one artifact-producing invocation, enough to run it again.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    /// Working directory the arguments are relative to.
    pub cwd: PathBuf,
    /// Fully resolved configuration.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub duration_secs: f64,
}

pub struct Recorder {
    args: Vec<String>,
    started: Instant,
}

impl Recorder {
    pub fn new(args: Vec<String>) -> Self {
        Self {
            args,
            started: Instant::now(),
        }
    }

    /// Writes the manifest to `path`.
    pub fn finish(
        &self,
        path: &Path,
        command: &str,
        config: serde_json::Value,
        seed: Option<u64>,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
    ) -> CliResult<()> {
        let manifest = RunManifest {
            command: command.to_string(),
            args: self.args.clone(),
            cwd: std::env::current_dir().map_err(CliError::io("."))?,
            config,
            seed,
            inputs,
            outputs,
            version: env!("CARGO_PKG_VERSION").to_string(),
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(CliError::io(path))
    }
}

/// `<file>.manifest.json` next to a file output.
pub fn manifest_for_file(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn load(path: &Path) -> CliResult<RunManifest> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: not a run manifest: {e}", path.display())))
}
