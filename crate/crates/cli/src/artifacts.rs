//! Output directories and staged artifact writes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "FLEETDESIGN_OUTPUT_ROOT";

/// Resolve a command's output directory. Relative paths land under the
/// output root when it is set.
pub fn resolve_out(out: Option<&Path>, default: &str) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| Path::new("runs").join(default));
    match root {
        Some(root) if out.is_relative() => root.join(out),
        _ => out,
    }
}

/// Files held in memory until the command has succeeded, so a failed run
/// leaves nothing behind.
#[derive(Default)]
pub struct Artifacts {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Artifacts {
    pub fn add(&mut self, name: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn add_json<T: serde::Serialize>(&mut self, name: impl Into<PathBuf>, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    /// Nest another set under `dir`.
    pub fn extend_under(&mut self, dir: impl AsRef<Path>, other: Artifacts) {
        for (name, bytes) in other.files {
            self.files.push((dir.as_ref().join(name), bytes));
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(n, _)| n.as_path())
    }

    pub fn write(self, dir: &Path) -> Result<()> {
        for (name, bytes) in self.files {
            let path = dir.join(&name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}

/// Render rows through a CSV writer into memory.
pub fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> fleetdesign::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}
