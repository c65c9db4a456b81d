//! Run directories: `<run>/{manifest.json, cache/, artifacts/, report/}`
//! plus an advisory `.lock` file held while a command runs.

mod config;
mod manifest;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::artifacts::{file_digest, ArtifactError};

pub use config::{Config, Overrides, Roles, SelfSftSettings, DEFAULT_ENDPOINT};
pub use manifest::{ArtifactRef, RunManifest, StageEntry};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("run directory {0} is locked by another command (remove .lock if it is stale)")]
    Locked(PathBuf),
    #[error("artifact {0} no longer matches its recorded digest")]
    DigestMismatch(String),
    #[error("artifacts come from different configurations: {0}")]
    MixedConfigs(String),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn run_id(&self) -> String {
        self.root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn cache(&self) -> PathBuf {
        self.root.join("cache")
    }
    pub fn artifacts(&self) -> PathBuf {
        self.root.join("artifacts")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn lock(&self) -> PathBuf {
        self.root.join(".lock")
    }

    /// Full ingested dataset.
    pub fn dataset(&self, d: &str) -> PathBuf {
        self.artifacts().join("datasets").join(format!("{d}.jsonl"))
    }
    pub fn dataset_manifest(&self, d: &str) -> PathBuf {
        self.artifacts().join("datasets").join(format!("{d}.manifest.json"))
    }
    /// Sampled evaluation questions.
    pub fn questions(&self, d: &str) -> PathBuf {
        self.artifacts().join("questions").join(format!("{d}.jsonl"))
    }
    pub fn expressions(&self, d: &str, kind: &str) -> PathBuf {
        self.artifacts().join("expressions").join(format!("{d}.{kind}.jsonl"))
    }
    pub fn exclusions(&self, d: &str, kind: &str) -> PathBuf {
        self.artifacts()
            .join("expressions")
            .join(format!("{d}.{kind}.exclusions.jsonl"))
    }
    pub fn judgments(&self, d: &str, kind: &str) -> PathBuf {
        self.artifacts().join("judgments").join(format!("{d}.{kind}.jsonl"))
    }
    pub fn pr(&self, d: &str, kind: &str) -> PathBuf {
        self.artifacts().join("pr").join(format!("{d}.{kind}.jsonl"))
    }
    pub fn contextual_pr(&self, d: &str, kind: &str, mode: &str) -> PathBuf {
        self.artifacts()
            .join("contextual_pr")
            .join(format!("{d}.{kind}.{mode}.jsonl"))
    }
    pub fn answers(&self, d: &str, condition: &str) -> PathBuf {
        self.artifacts().join("answers").join(format!("{d}.{condition}.jsonl"))
    }
    pub fn scores(&self, d: &str) -> PathBuf {
        self.artifacts().join("scores").join(format!("{d}.jsonl"))
    }
    /// Externally produced error annotations.
    pub fn errors(&self) -> PathBuf {
        self.artifacts().join("errors.jsonl")
    }
    pub fn selfsft(&self) -> PathBuf {
        self.artifacts().join("selfsft")
    }
    pub fn selfsft_naive(&self) -> PathBuf {
        self.artifacts().join("selfsft-naive")
    }

    /// Path relative to the run root, with `/` separators.
    pub fn relative(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    }

    pub fn artifact_ref(&self, path: &Path) -> Result<ArtifactRef, RunError> {
        Ok(ArtifactRef {
            path: self.relative(path),
            digest: file_digest(path)?,
        })
    }

    /// Files under `dir` (recursively), sorted.
    pub fn files_under(&self, dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            let Ok(entries) = std::fs::read_dir(&d) else {
                continue;
            };
            for e in entries.flatten() {
                let p = e.path();
                if p.is_dir() {
                    stack.push(p);
                } else if !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')) {
                    out.push(p);
                }
            }
        }
        out.sort();
        out
    }
}

/// Held for the duration of one command; removed on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(layout: &RunLayout) -> Result<Self, RunError> {
        std::fs::create_dir_all(&layout.root).map_err(|source| RunError::Io {
            path: layout.root.clone(),
            source,
        })?;
        let path = layout.lock();
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(RunError::Locked(layout.root.clone())),
            Err(source) => Err(RunError::Io { path, source }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let layout = RunLayout::new(dir.path().join("r1"));
        let lock = RunLock::acquire(&layout).unwrap();
        assert!(matches!(RunLock::acquire(&layout), Err(RunError::Locked(_))));
        drop(lock);
        RunLock::acquire(&layout).unwrap();
    }

    #[test]
    fn relative_paths() {
        let layout = RunLayout::new("/tmp/runs/r1");
        assert_eq!(
            layout.relative(&layout.answers("csqa", "base")),
            "artifacts/answers/csqa.base.jsonl"
        );
        assert_eq!(layout.run_id(), "r1");
    }
}
