//! Fine-tuning backends behind the trainer contract:
//!
//! ```text
//! <program> train --data <jsonl> --base <model_ref> --rank 16 --alpha 16 \
//!     --epochs 3 --batch 64 --lr 3e-4 --out <dir>
//! ```
//!
//! The trainer writes `<dir>/result.json` as
//! `{"model_ref": "...", "epoch_losses": [...]}` and exits 0.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};

use super::SelfSftError;
use crate::artifacts::{file_digest, read_json, write_json};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub data: PathBuf,
    pub base: String,
    pub rank: u32,
    pub alpha: u32,
    pub epochs: u32,
    pub batch: u32,
    pub lr: f64,
    pub out: PathBuf,
}

impl TrainJob {
    pub fn new(data: &Path, base: &str, out: &Path) -> Self {
        Self {
            data: data.to_path_buf(),
            base: base.to_string(),
            rank: 16,
            alpha: 16,
            epochs: 3,
            batch: 64,
            lr: 3e-4,
            out: out.to_path_buf(),
        }
    }

    pub fn args(&self) -> Vec<String> {
        vec![
            "train".into(),
            "--data".into(),
            self.data.display().to_string(),
            "--base".into(),
            self.base.clone(),
            "--rank".into(),
            self.rank.to_string(),
            "--alpha".into(),
            self.alpha.to_string(),
            "--epochs".into(),
            self.epochs.to_string(),
            "--batch".into(),
            self.batch.to_string(),
            "--lr".into(),
            format!("{:e}", self.lr),
            "--out".into(),
            self.out.display().to_string(),
        ]
    }

    pub fn result_path(&self) -> PathBuf {
        self.out.join("result.json")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub model_ref: String,
    pub epoch_losses: Vec<f64>,
}

impl TrainResult {
    fn validate(&self, path: &Path) -> Result<(), SelfSftError> {
        let bad = |reason: &str| Err(SelfSftError::Trainer(format!("{}: {reason}", path.display())));
        if self.model_ref.trim().is_empty() {
            return bad("empty model_ref");
        }
        if self.epoch_losses.iter().any(|l| !l.is_finite()) {
            return bad("non-finite epoch loss");
        }
        Ok(())
    }
}

pub trait Trainer: Send + Sync {
    fn name(&self) -> &str;
    fn train(&self, job: &TrainJob) -> Result<TrainResult, SelfSftError>;
}

/// Runs an external program per the contract.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandTrainer {
    pub command: Vec<String>,
}

impl Trainer for CommandTrainer {
    fn name(&self) -> &str {
        "command"
    }

    fn train(&self, job: &TrainJob) -> Result<TrainResult, SelfSftError> {
        let (program, pre) = self
            .command
            .split_first()
            .ok_or_else(|| SelfSftError::Trainer("empty trainer command".into()))?;
        std::fs::create_dir_all(&job.out).map_err(|e| SelfSftError::Trainer(format!("{}: {e}", job.out.display())))?;
        log::info!("trainer: {} {} {}", program, pre.join(" "), job.args().join(" "));
        let output = Command::new(program)
            .args(pre)
            .args(job.args())
            .output()
            .map_err(|e| SelfSftError::Trainer(format!("cannot start {program}: {e}")))?;
        if !output.status.success() {
            return Err(SelfSftError::Trainer(format!(
                "{program} exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let path = job.result_path();
        let result: TrainResult = read_json(&path).map_err(|e| SelfSftError::Trainer(e.to_string()))?;
        result.validate(&path)?;
        Ok(result)
    }
}

/// Writes a deterministic result without training. The model reference is
/// derived from the base and the data digest.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StubTrainer;

impl Trainer for StubTrainer {
    fn name(&self) -> &str {
        "stub"
    }

    fn train(&self, job: &TrainJob) -> Result<TrainResult, SelfSftError> {
        let d = file_digest(&job.data).map_err(|e| SelfSftError::Trainer(e.to_string()))?;
        let root = job.base.split("+sft-").next().unwrap_or(&job.base);
        let model_ref = format!("{root}+sft-{}", &d[..8]);
        let first = 1.0 + (u64::from_str_radix(&d[8..12], 16).unwrap_or(0) % 1000) as f64 / 1000.0;
        let epoch_losses = (0..job.epochs).map(|e| first * 0.8f64.powi(e as i32)).collect();
        let result = TrainResult {
            model_ref,
            epoch_losses,
        };
        write_json(&job.result_path(), &result).map_err(|e| SelfSftError::Trainer(e.to_string()))?;
        Ok(result)
    }
}

type TrainerFactory = Box<dyn Fn(&[String]) -> Result<Box<dyn Trainer>, SelfSftError> + Send + Sync>;

/// Trainers registered by name; the factory gets the configured command.
pub struct TrainerRegistry {
    factories: BTreeMap<String, TrainerFactory>,
}

impl TrainerRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&[String]) -> Result<Box<dyn Trainer>, SelfSftError> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn create(&self, name: &str, command: &[String]) -> Result<Box<dyn Trainer>, SelfSftError> {
        let f = self
            .factories
            .get(name)
            .ok_or_else(|| SelfSftError::Unknown(format!("trainer {name:?}")))?;
        f(command)
    }
}

impl Default for TrainerRegistry {
    fn default() -> Self {
        let mut reg = Self::empty();
        reg.register("stub", |_| Ok(Box::new(StubTrainer)));
        reg.register("command", |cmd| {
            if cmd.is_empty() {
                return Err(SelfSftError::Trainer("trainer \"command\" needs a command line".into()));
            }
            Ok(Box::new(CommandTrainer { command: cmd.to_vec() }))
        });
        reg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contract_arguments() {
        let job = TrainJob::new(Path::new("d.jsonl"), "base-model", Path::new("out"));
        assert_eq!(
            job.args().join(" "),
            "train --data d.jsonl --base base-model --rank 16 --alpha 16 --epochs 3 --batch 64 --lr 3e-4 --out out"
        );
    }

    #[test]
    fn stub_is_deterministic_and_writes_result() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("sft.jsonl");
        std::fs::write(&data, "{}\n").unwrap();
        let job = TrainJob::new(&data, "toy+sft-00000000", &dir.path().join("out"));
        let a = StubTrainer.train(&job).unwrap();
        assert_eq!(a, StubTrainer.train(&job).unwrap());
        assert!(a.model_ref.starts_with("toy+sft-"));
        assert_eq!(a.epoch_losses.len(), 3);
        assert!(a.epoch_losses[2] < a.epoch_losses[0]);
        let on_disk: TrainResult = read_json(&job.result_path()).unwrap();
        assert_eq!(on_disk, a);
    }

    #[cfg(unix)]
    #[test]
    fn command_trainer_reads_result_json() {
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("fake-trainer.sh");
        std::fs::write(
            &script,
            "#!/bin/sh\nwhile [ $# -gt 0 ]; do case \"$1\" in --out) out=\"$2\"; shift;; esac; shift; done\n\
             mkdir -p \"$out\"\necho '{\"model_ref\": \"tuned\", \"epoch_losses\": [2.0, 1.0]}' > \"$out/result.json\"\n",
        )
        .unwrap();
        let t = CommandTrainer {
            command: vec!["sh".into(), script.display().to_string()],
        };
        let job = TrainJob::new(Path::new("x.jsonl"), "b", &dir.path().join("out"));
        assert_eq!(t.train(&job).unwrap().model_ref, "tuned");

        let failing = CommandTrainer {
            command: vec!["sh".into(), "-c".into(), "echo boom >&2; exit 3".into()],
        };
        let err = failing.train(&job).unwrap_err().to_string();
        assert!(err.contains("boom"), "{err}");
    }

    #[test]
    fn registry_names() {
        let reg = TrainerRegistry::default();
        assert_eq!(reg.names(), vec!["command", "stub"]);
        assert!(reg.create("command", &[]).is_err());
        assert!(reg.create("nope", &[]).is_err());
    }
}
