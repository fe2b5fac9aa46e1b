//! Output directory handling and run manifests.

use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// An output directory that remembers what was written to it.
pub struct OutputDir {
    root: PathBuf,
    written: RefCell<Vec<String>>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("cannot create output directory {}", root.display()))?;
        Ok(Self { root: root.to_path_buf(), written: RefCell::new(Vec::new()) })
    }

    pub fn text(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.root.join(name);
        fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
        self.written.borrow_mut().push(name.to_string());
        Ok(())
    }

    pub fn json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.text(name, &s)
    }

    /// Writes `manifest.json`: tool versions, seed, the full configuration
    /// and its SHA-256. Nothing time- or host-dependent goes in, so reruns
    /// are byte-identical.
    pub fn manifest<T: Serialize>(&self, command: &str, seed: Option<u64>, config: &T) -> Result<()> {
        let config = serde_json::to_value(config)?;
        let digest = Sha256::digest(serde_json::to_string(&config)?.as_bytes());
        let hash: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        let manifest = Manifest {
            command,
            cli_version: env!("CARGO_PKG_VERSION"),
            library_version: subgroup_balance::VERSION,
            seed,
            config_sha256: hash,
            config,
            outputs: self.written.borrow().clone(),
        };
        self.json("manifest.json", &manifest)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    cli_version: &'a str,
    library_version: &'a str,
    seed: Option<u64>,
    config_sha256: String,
    config: serde_json::Value,
    outputs: Vec<String>,
}
