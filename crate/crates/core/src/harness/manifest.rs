use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Provenance record written next to every run's artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
    pub git_describe: String,
    pub version: String,
    pub wall_time_s: f64,
    pub outputs: Vec<PathBuf>,
}

/// `git describe --always --dirty`, or `unknown` outside a repository.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Manifest location for an output: `<dir>/run.json` for directories, `<file>.run.json` otherwise.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("run.json")
    } else {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".run.json");
        out.with_file_name(name)
    }
}

impl RunManifest {
    pub fn write(&self, primary: &Path) -> Result<PathBuf> {
        let path = manifest_path(primary);
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

/// Refuse to replace an existing artifact unless `force` is set.
pub fn ensure_writable(path: &Path, force: bool) -> Result<()> {
    let occupied = if path.is_dir() { fs::read_dir(path)?.next().is_some() } else { path.exists() };
    if occupied && !force {
        bail!(Config, "{} already exists; pass --force to overwrite", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overwrite_guard_and_paths() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("out.json");
        ensure_writable(&f, false).unwrap();
        fs::write(&f, "{}").unwrap();
        assert!(matches!(ensure_writable(&f, false), Err(crate::Error::Config(_))));
        ensure_writable(&f, true).unwrap();
        assert_eq!(manifest_path(&f), dir.path().join("out.json.run.json"));
        assert_eq!(manifest_path(dir.path()), dir.path().join("run.json"));
    }
}
