//! Append-only record of what each command produced.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::artifacts::{file_digest, read_json, write_json};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    /// Relative to the run directory.
    pub path: String,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: String,
    pub config_digest: String,
    pub params: serde_json::Value,
    pub inputs: Vec<ArtifactRef>,
    pub outputs: Vec<ArtifactRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: String,
    pub config_digest: String,
    pub seeds: BTreeMap<String, u64>,
    /// Endpoint descriptors; credentials appear only by name.
    pub endpoints: Vec<serde_json::Value>,
    pub prompt_digest: String,
    pub stages: Vec<StageEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Option<Self>, RunError> {
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(read_json(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<(), RunError> {
        Ok(write_json(path, self)?)
    }

    /// Appends `entry` unless an identical entry is already recorded.
    /// Returns whether the manifest changed.
    pub fn record(&mut self, entry: StageEntry) -> bool {
        if let Some(it) = entry.iteration {
            self.iteration = Some(self.iteration.map_or(it, |cur| cur.max(it)));
        }
        if self.stages.contains(&entry) {
            return false;
        }
        self.stages.push(entry);
        true
    }

    /// The most recent entry that wrote each output path.
    pub fn latest_outputs(&self) -> BTreeMap<&str, (&StageEntry, &ArtifactRef)> {
        let mut out = BTreeMap::new();
        for s in &self.stages {
            for a in &s.outputs {
                out.insert(a.path.as_str(), (s, a));
            }
        }
        out
    }

    /// Checks that every latest output still exists with its recorded digest.
    pub fn verify(&self, run_dir: &Path) -> Result<(), RunError> {
        self.verify_under(run_dir, "")
    }

    /// [`Self::verify`] restricted to paths starting with `prefix`.
    pub fn verify_under(&self, run_dir: &Path, prefix: &str) -> Result<(), RunError> {
        for (path, (_, a)) in self.latest_outputs().into_iter().filter(|(p, _)| p.starts_with(prefix)) {
            let actual = file_digest(&run_dir.join(path))?;
            if actual != a.digest {
                return Err(RunError::DigestMismatch(path.to_string()));
            }
        }
        Ok(())
    }
}
