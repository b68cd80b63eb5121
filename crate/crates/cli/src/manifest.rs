use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Record of one command invocation, written as `manifest.json` in the
/// output directory. Everything except `timings` is reproducible.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    /// Input path to SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub outputs: Vec<String>,
    /// Seconds per phase.
    pub timings: BTreeMap<String, f64>,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn new(command: &str, config: Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config,
            inputs: BTreeMap::new(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
            started: Some(Instant::now()),
        }
    }

    /// Hashes a file, or every file directly inside a directory.
    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        if path.is_dir() {
            let mut entries: Vec<_> = std::fs::read_dir(path)?.filter_map(|e| e.ok()).map(|e| e.path()).collect();
            entries.sort();
            for p in entries.into_iter().filter(|p| p.is_file()) {
                self.input(&p)?;
            }
            return Ok(());
        }
        let bytes = std::fs::read(path)?;
        let digest = Sha256::digest(&bytes);
        let hex = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.inputs.insert(path.display().to_string(), hex);
        Ok(())
    }

    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.timings.insert(phase.to_string(), t.elapsed().as_secs_f64());
        out
    }

    pub fn write(mut self, dir: &Path) -> Result<(), CliError> {
        if let Some(t) = self.started {
            self.timings.insert("total".into(), t.elapsed().as_secs_f64());
        }
        self.outputs.sort();
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(())
    }
}
