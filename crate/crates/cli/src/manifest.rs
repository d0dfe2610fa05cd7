//! Output directory bookkeeping: every file a command reads or writes is
//! digested into the run manifest.

use crate::error::CliError;
use orpercept_core::dataio::{read_file, write_file, RunConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const MANIFEST_NAME: &str = "manifest.json";

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads files and remembers their digests, keyed by the path as given.
#[derive(Default)]
pub struct Inputs {
    digests: BTreeMap<String, String>,
}

impl Inputs {
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = read_file(path)?;
        self.digests.insert(path.display().to_string(), digest(&bytes));
        Ok(bytes)
    }

    pub fn read_string(&mut self, path: &Path) -> Result<String, CliError> {
        String::from_utf8(self.read(path)?).map_err(|_| CliError::Data(format!("{}: not UTF-8", path.display())))
    }
}

pub struct Output {
    root: PathBuf,
    written: BTreeMap<String, String>,
}

impl Output {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| CliError::Data(format!("{}: {e}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::Data(format!("{}: {e}", parent.display())))?;
        }
        write_file(&path, bytes)?;
        self.written.insert(rel.to_string(), digest(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    pub fn finish(mut self, run: RunInfo, inputs: Inputs) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: run.command,
            arguments: run.arguments,
            seed: run.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: run.config,
            inputs: inputs.digests,
            outputs: std::mem::take(&mut self.written),
        };
        self.write_json(MANIFEST_NAME, &manifest)
    }
}

/// What the command was asked to do, echoed into the manifest.
pub struct RunInfo {
    pub command: String,
    pub arguments: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub config: RunConfig,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub arguments: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub config: RunConfig,
    /// SHA-256 of every input file.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every output file, by path relative to the output
    /// directory.
    pub outputs: BTreeMap<String, String>,
}
