//! Artifact plumbing shared by all commands: an output directory that
//! checksums everything written into it and closes with a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// What a command did: its argv, the seed it ran under, and a SHA-256 of
/// every file it wrote. Re-running the recorded command against the
/// recorded resolved configuration reproduces those checksums.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub out_dir: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolved_config: Option<String>,
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut hex = String::with_capacity(64);
    for byte in digest {
        let _ = write!(hex, "{byte:02x}");
    }
    hex
}

/// An output directory plus the running checksum record.
pub struct ArtifactSet {
    dir: PathBuf,
    checksums: BTreeMap<String, String>,
}

impl ArtifactSet {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            checksums: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.checksums.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    /// Checksums a file some other writer already placed in the directory.
    pub fn track(&mut self, name: &str) -> Result<()> {
        let path = self.dir.join(name);
        let bytes = fs::read(&path).with_context(|| format!("reading back {}", path.display()))?;
        self.checksums.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// Writes `manifest.json` covering everything recorded so far.
    pub fn finish(self, seed: Option<u64>, resolved_config: Option<String>) -> Result<()> {
        let manifest = RunManifest {
            command: std::env::args().collect(),
            seed,
            out_dir: self.dir.display().to_string(),
            resolved_config,
            artifacts: self.checksums,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
