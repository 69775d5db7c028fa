//! `manifest.json`: every artifact a run produced, by role, with its
//! SHA-256, so a finished run can be re-checked with `distlab verify`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub created_unix: u64,
    pub command: String,
    pub artifacts: BTreeMap<String, Artifact>,
    /// Work that did not complete, keyed by what failed.
    #[serde(default)]
    pub failures: BTreeMap<String, String>,
    #[serde(default)]
    pub config: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Collects artifacts under one root directory as they are written.
#[derive(Debug)]
pub struct ManifestBuilder {
    root: PathBuf,
    manifest: Manifest,
}

impl ManifestBuilder {
    pub fn new(root: impl Into<PathBuf>, command: impl Into<String>) -> Self {
        Self {
            root: root.into(),
            manifest: Manifest {
                command: command.into(),
                ..Manifest::default()
            },
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn set_config(&mut self, config: serde_json::Value) {
        self.manifest.config = config;
    }

    /// Hashes `path` (which must live under the root) and records it.
    pub fn record(&mut self, role: impl Into<String>, path: &Path) -> anyhow::Result<()> {
        let rel = path
            .strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        let sha256 = sha256_file(path)?;
        self.manifest
            .artifacts
            .insert(role.into(), Artifact { path: rel, sha256 });
        Ok(())
    }

    pub fn fail(&mut self, what: impl Into<String>, error: &anyhow::Error) {
        self.manifest
            .failures
            .insert(what.into(), format!("{error:#}"));
    }

    pub fn failures(&self) -> &BTreeMap<String, String> {
        &self.manifest.failures
    }

    pub fn write(mut self) -> anyhow::Result<(PathBuf, Manifest)> {
        self.manifest.created_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok((path, self.manifest))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerifyProblem {
    Missing { role: String, path: String },
    Changed { role: String, path: String },
}

/// Re-hashes every artifact listed in the manifest at `path`.
pub fn verify(path: &Path) -> anyhow::Result<Vec<VerifyProblem>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .with_context(|| format!("parsing manifest {}", path.display()))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut problems = Vec::new();
    for (role, art) in &manifest.artifacts {
        let file = root.join(&art.path);
        if !file.exists() {
            problems.push(VerifyProblem::Missing {
                role: role.clone(),
                path: art.path.clone(),
            });
        } else if sha256_file(&file)? != art.sha256 {
            problems.push(VerifyProblem::Changed {
                role: role.clone(),
                path: art.path.clone(),
            });
        }
    }
    Ok(problems)
}
