//! Experiment configuration: a TOML file plus command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::digest::json_digest;
use crate::gateway::ModelEndpoint;
use crate::perplexity::ContextualMode;
use crate::selfsft::validate_k;

/// Which configured endpoint serves each role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Roles {
    /// Writes stories and rules.
    pub generator: String,
    /// Answers questions.
    pub answerer: String,
    /// Yes/no commonsense judge.
    pub judge: String,
    /// Token scoring for perplexity.
    pub lm: String,
    /// Commonsense plausibility scores.
    pub scorer: String,
    pub embedder: String,
}

impl Default for Roles {
    fn default() -> Self {
        let m = DEFAULT_ENDPOINT.to_string();
        Self {
            generator: m.clone(),
            answerer: m.clone(),
            judge: m.clone(),
            lm: m.clone(),
            scorer: m.clone(),
            embedder: m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfSftSettings {
    pub k: f64,
    pub iterations: usize,
    pub questions_per_dataset: usize,
    pub trajectory_questions: usize,
    pub seen_datasets: Vec<String>,
    pub strategy: String,
    pub trainer: String,
    /// Program and leading arguments for the `command` trainer.
    pub trainer_command: Vec<String>,
}

impl Default for SelfSftSettings {
    fn default() -> Self {
        Self {
            k: 50.0,
            iterations: 3,
            questions_per_dataset: 200,
            trajectory_questions: 20,
            seen_datasets: Vec::new(),
            strategy: "topk".into(),
            trainer: "stub".into(),
            trainer_command: Vec::new(),
        }
    }
}

pub const DEFAULT_ENDPOINT: &str = "mock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub persona: String,
    pub n_stories: usize,
    pub n_shuffles: usize,
    pub temperature_answer: f64,
    pub contextual_mode: ContextualMode,
    pub paired_test: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mock_dir: Option<PathBuf>,
    pub endpoints: BTreeMap<String, ModelEndpoint>,
    pub roles: Roles,
    pub selfsft: SelfSftSettings,
}

impl Default for Config {
    fn default() -> Self {
        let mut endpoints = BTreeMap::new();
        endpoints.insert(
            DEFAULT_ENDPOINT.to_string(),
            ModelEndpoint::mock(DEFAULT_ENDPOINT, "mock-llm"),
        );
        Self {
            seed: 0,
            persona: "Jane".into(),
            n_stories: 5,
            n_shuffles: 10,
            temperature_answer: 0.0,
            contextual_mode: ContextualMode::Literal,
            paired_test: "paired-t".into(),
            mock_dir: None,
            endpoints,
            roles: Roles::default(),
            selfsft: SelfSftSettings::default(),
        }
    }
}

/// Flag values that win over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub n_stories: Option<usize>,
    pub n_shuffles: Option<usize>,
    pub k: Option<f64>,
    pub iterations: Option<usize>,
    pub temperature_answer: Option<f64>,
    pub mock_dir: Option<PathBuf>,
}

impl Config {
    /// Parses a config; the built-in `mock` endpoint stays available unless
    /// the file defines its own.
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))?;
        cfg.endpoints
            .entry(DEFAULT_ENDPOINT.to_string())
            .or_insert_with(|| ModelEndpoint::mock(DEFAULT_ENDPOINT, "mock-llm"));
        Ok(cfg)
    }

    /// Reads `path`; relative `mock_dir` values resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = &cfg.mock_dir {
            if dir.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.mock_dir = Some(base.join(dir));
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.n_stories {
            self.n_stories = v;
        }
        if let Some(v) = o.n_shuffles {
            self.n_shuffles = v;
        }
        if let Some(v) = o.k {
            self.selfsft.k = v;
        }
        if let Some(v) = o.iterations {
            self.selfsft.iterations = v;
        }
        if let Some(v) = o.temperature_answer {
            self.temperature_answer = v;
        }
        if let Some(v) = &o.mock_dir {
            self.mock_dir = Some(v.clone());
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.n_stories == 0 {
            return bad("n_stories must be at least 1".into());
        }
        if self.n_shuffles == 0 {
            return bad("n_shuffles must be at least 1".into());
        }
        if !(self.temperature_answer >= 0.0 && self.temperature_answer.is_finite()) {
            return bad(format!(
                "temperature_answer must be nonnegative, got {}",
                self.temperature_answer
            ));
        }
        if self.persona.trim().is_empty() {
            return bad("persona must be nonempty".into());
        }
        for (id, ep) in &self.endpoints {
            if &ep.endpoint_id != id {
                return bad(format!(
                    "endpoint table key {id:?} differs from endpoint_id {:?}",
                    ep.endpoint_id
                ));
            }
            ep.validate().map_err(|e| RunError::Config(e.to_string()))?;
        }
        let r = &self.roles;
        for (role, id) in [
            ("generator", &r.generator),
            ("answerer", &r.answerer),
            ("judge", &r.judge),
            ("lm", &r.lm),
            ("scorer", &r.scorer),
            ("embedder", &r.embedder),
        ] {
            if !self.endpoints.contains_key(id) {
                return bad(format!("role {role} names unknown endpoint {id:?}"));
            }
        }
        validate_k(self.selfsft.k).map_err(|e| RunError::Config(e.to_string()))?;
        if self.selfsft.iterations == 0 {
            return bad("selfsft.iterations must be at least 1".into());
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(
            (c.n_stories, c.n_shuffles, c.selfsft.k, c.selfsft.iterations),
            (5, 10, 50.0, 3)
        );
        assert_eq!(c.temperature_answer, 0.0);
    }

    #[test]
    fn builtin_mock_survives_custom_endpoints() {
        let c = Config::from_toml(
            "[endpoints.x]\nendpoint_id = \"x\"\nbase_url = \"http://h\"\napi_kind = \"chat\"\nmodel_name = \"m\"\n",
        )
        .unwrap();
        assert_eq!(c.endpoints.keys().collect::<Vec<_>>(), vec!["mock", "x"]);
        c.validate().unwrap();
    }

    #[test]
    fn toml_with_endpoints_and_overrides() {
        let text = r#"
seed = 7
n_shuffles = 3

[endpoints.gen]
endpoint_id = "gen"
base_url = "http://localhost:8000"
api_kind = "chat"
model_name = "small"
auth_ref = "GEN_KEY"
rate_limit = 60

[roles]
generator = "gen"
answerer = "mock"
judge = "mock"
lm = "mock"
scorer = "mock"
embedder = "mock"

[selfsft]
seen_datasets = ["csqa"]
"#;
        let mut c: Config = Config::from_toml(text).unwrap();
        // The default mock endpoint disappears when a table is given.
        c.endpoints.insert("mock".into(), ModelEndpoint::mock("mock", "m"));
        c.validate().unwrap();
        assert_eq!(c.endpoints["gen"].rate_limit, 60.0);
        let before = c.digest();
        c.apply(&Overrides {
            k: Some(30.0),
            ..Default::default()
        });
        assert_eq!(c.selfsft.k, 30.0);
        assert_ne!(before, c.digest());
    }

    #[test]
    fn unknown_keys_and_roles_are_rejected() {
        assert!(Config::from_toml("sed = 1").is_err());
        let mut c = Config::default();
        c.roles.judge = "nope".into();
        assert!(c.validate().is_err());
    }
}
