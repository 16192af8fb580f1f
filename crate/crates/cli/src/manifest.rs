//! Run manifests and output bookkeeping.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::commands;
use crate::config::{ModelConfig, SCHEMA_VERSION};
use crate::error::{CliError, CliResult};
use crate::Command;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    /// The command with its resolved options.
    pub invocation: Command,
    /// Resolved model; replay uses it instead of re-reading the config file.
    pub model: Option<ModelConfig>,
    /// Output file names, relative to the manifest's directory.
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
    pub step_counts: BTreeMap<String, u64>,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Collects the files a command writes.
pub struct Output {
    dir: PathBuf,
    files: Vec<String>,
    pub steps: BTreeMap<String, u64>,
    /// Failed checks (verify only).
    pub failures: usize,
}

impl Output {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            steps: BTreeMap::new(),
            failures: 0,
        }
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.dir.join(name);
        let mut f = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        f.write_all(bytes).map_err(|e| CliError::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable report");
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    /// Renders with a library CSV writer into memory, then writes the file.
    pub fn write_csv<F>(&mut self, name: &str, render: F) -> CliResult<()>
    where
        F: FnOnce(&mut Vec<u8>) -> memport::Result<()>,
    {
        let mut buf = Vec::new();
        render(&mut buf)?;
        self.write_bytes(name, &buf)
    }
}

fn resolve_model(cmd: &Command, model: Option<ModelConfig>) -> CliResult<Option<ModelConfig>> {
    if model.is_some() {
        return Ok(model);
    }
    let path = match cmd {
        Command::Solve(a) => Some(&a.config),
        Command::Growth(a) => Some(&a.config),
        Command::Simulate(a) => Some(&a.config),
        Command::Verify(a) => a.config.as_ref(),
        Command::Estimate(_) | Command::Replay(_) => None,
    };
    path.map(|p| ModelConfig::load(p)).transpose()
}

/// Runs one command and writes its manifest. Returns the manifest path and
/// the number of failed checks.
pub fn execute(mut cmd: Command, model: Option<ModelConfig>, out_dir: &Path) -> CliResult<(PathBuf, usize)> {
    let start = Instant::now();
    if let Command::Estimate(a) = &mut cmd {
        a.prices = fs::canonicalize(&a.prices).map_err(|e| CliError::io(&a.prices, e))?;
    }
    let model = resolve_model(&cmd, model)?;
    let built = model.as_ref().map(ModelConfig::build).transpose()?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let mut out = Output::new(out_dir);
    commands::dispatch(&cmd, built.as_ref(), &mut out)?;
    let name = cmd.name();
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        command: name.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cmd.seed(),
        invocation: cmd,
        model,
        outputs: out.files.clone(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        step_counts: out.steps.clone(),
    };
    let file = format!("{name}-manifest.json");
    let failures = out.failures;
    out.write_json(&file, &manifest)?;
    Ok((out_dir.join(file), failures))
}
