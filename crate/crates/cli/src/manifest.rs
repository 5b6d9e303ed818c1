//! `manifest.json`: every file a command produced under the output
//! directory, with its FNV-1a 64 content hash. Successive commands merge
//! into the same manifest.

use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::path::Path;

use btm_core::{Error, Result, FORMAT_VERSION};
use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// 16 lowercase hex digits.
    pub fnv1a64: String,
    pub bytes: u64,
    /// Command that last wrote the file.
    pub command: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub command: String,
    pub seed: u64,
    pub config: String,
    pub config_fnv1a64: String,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub format_version: u32,
    pub runs: Vec<RunEntry>,
    pub files: BTreeMap<String, FileEntry>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            format_version: FORMAT_VERSION,
            runs: Vec::new(),
            files: BTreeMap::new(),
        }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> String {
    let mut h = FnvHasher::default();
    h.write(bytes);
    format!("{:016x}", h.finish())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

impl Manifest {
    pub fn load_or_default(out_dir: &Path) -> Result<Self> {
        let path = out_dir.join(MANIFEST_NAME);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = read_bytes(&path)?;
        let mut m: Manifest = serde_json::from_slice(&text)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        m.tool_version = env!("CARGO_PKG_VERSION").to_string();
        Ok(m)
    }

    /// Hashes `files` (relative to `out_dir`) and records the run.
    pub fn record(
        &mut self,
        out_dir: &Path,
        command: &str,
        seed: u64,
        config_path: &Path,
        files: &[String],
    ) -> Result<()> {
        let config = read_bytes(config_path)?;
        for rel in files {
            let bytes = read_bytes(&out_dir.join(rel))?;
            self.files.insert(
                rel.clone(),
                FileEntry {
                    fnv1a64: fnv1a64(&bytes),
                    bytes: bytes.len() as u64,
                    command: command.to_string(),
                },
            );
        }
        self.runs.push(RunEntry {
            command: command.to_string(),
            seed,
            config: config_path.display().to_string(),
            config_fnv1a64: fnv1a64(&config),
            files: files.to_vec(),
        });
        Ok(())
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidInput(format!("manifest encoding: {e}")))?;
        fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
    }
}
