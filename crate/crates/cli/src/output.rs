//! Provenance records and all-or-nothing artifact writes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use blendrig_core::Error;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Reproduction record embedded in every artifact. Inputs are identified by
/// content hash so reruns from another directory produce identical files.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub config: Value,
    pub inputs: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(command: &str, seed: Option<u64>, config: &impl Serialize) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        Ok(Self {
            tool: "blendrig",
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            seed,
            config_hash: sha256_hex(serde_json::to_string(&config)?.as_bytes()),
            config,
            inputs: BTreeMap::new(),
        })
    }

    pub fn input(mut self, role: &str, path: &Path) -> Result<Self> {
        self.inputs.insert(role.into(), file_sha256(path)?);
        Ok(self)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("provenance serializes")
    }
}

fn parent_of(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn temp_builder(mode: u32) -> tempfile::Builder<'static, 'static> {
    let mut b = tempfile::Builder::new();
    b.prefix(".blendrig-");
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        b.permissions(std::fs::Permissions::from_mode(mode));
    }
    #[cfg(not(unix))]
    let _ = mode;
    b
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// Runs `write` against a temporary file next to `path`, then renames it
/// into place.
pub fn write_file_with(
    path: &Path,
    write: impl FnOnce(&Path) -> blendrig_core::Result<()>,
) -> Result<()> {
    let dir = parent_of(path);
    ensure_dir(&dir)?;
    let tmp = temp_builder(0o644)
        .tempfile_in(&dir)
        .map_err(|e| Error::io(&dir, e))?;
    write(tmp.path())?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    write_file_with(path, |tmp| {
        std::fs::write(tmp, bytes).map_err(|e| Error::io(tmp, e))
    })
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Writes JSON lines: `header` first, then one line per record.
pub fn write_jsonl<H: Serialize, R: Serialize>(
    path: &Path,
    header: &H,
    records: &[R],
) -> Result<()> {
    let mut text = serde_json::to_string(header)?;
    text.push('\n');
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_bytes(path, text.as_bytes())
}

/// Builds a directory of files in a temporary sibling, then moves each
/// top-level entry into `dir`, replacing entries of the same name.
pub fn write_dir_with<T>(
    dir: &Path,
    build: impl FnOnce(&Path) -> blendrig_core::Result<T>,
) -> Result<T> {
    let parent = parent_of(dir);
    ensure_dir(&parent)?;
    let tmp = temp_builder(0o755)
        .tempdir_in(&parent)
        .map_err(|e| Error::io(&parent, e))?;
    let out = build(tmp.path())?;
    ensure_dir(dir)?;
    let entries = std::fs::read_dir(tmp.path()).map_err(|e| Error::io(tmp.path(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(tmp.path(), e))?;
        let dest = dir.join(entry.file_name());
        if dest.is_dir() {
            std::fs::remove_dir_all(&dest).map_err(|e| Error::io(&dest, e))?;
        } else if dest.exists() {
            std::fs::remove_file(&dest).map_err(|e| Error::io(&dest, e))?;
        }
        std::fs::rename(entry.path(), &dest)
            .map_err(|e| Error::io(&dest, e))
            .with_context(|| format!("moving {} into place", dest.display()))?;
    }
    Ok(out)
}
