//! Run manifests: enough to re-run a command and get the same bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use markov_conformal::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// `true` when no `--seed` was given and one was drawn.
    pub seed_drawn: bool,
    /// Arguments after the program name, `--out` removed, `--seed` always set.
    pub args: Vec<String>,
    pub out: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub derived_matrix: Option<Vec<Vec<f64>>>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, seed_drawn: bool, args: Vec<String>, out: &Path) -> Self {
        Self {
            tool: env!("CARGO_BIN_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            seed_drawn,
            args,
            out: out.display().to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            derived_matrix: None,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = toml::to_string(self)
            .map_err(|e| Error::InvalidInput(format!("cannot serialize manifest: {e}")))?;
        std::fs::write(&path, text).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let name = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: name.clone(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::InvalidInput(format!("{name}: {e}")))
    }
}

/// Drops `--out <dir>` / `--out=<dir>` and appends `--seed` when missing.
pub fn replayable_args(raw: &[String], seed: u64) -> Vec<String> {
    let mut out = Vec::with_capacity(raw.len() + 2);
    let mut has_seed = false;
    let mut it = raw.iter();
    while let Some(a) = it.next() {
        if a == "--out" {
            it.next();
            continue;
        }
        if a.starts_with("--out=") {
            continue;
        }
        if a == "--seed" || a.starts_with("--seed=") {
            has_seed = true;
        }
        out.push(a.clone());
    }
    if !has_seed {
        out.push("--seed".to_string());
        out.push(seed.to_string());
    }
    out
}
