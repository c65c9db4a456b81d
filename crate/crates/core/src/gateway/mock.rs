//! Deterministic mock backend.
//!
//! A request is resolved in order by:
//! 1. a fixture file `<mock_dir>/<request digest>.json` holding the response
//!    JSON (completion list, token list, score, or vector);
//! 2. the first matching rule in `<mock_dir>/script.json` ([`MockScript`]);
//! 3. a synthetic response derived from a hash of the model name and input.
//!
//! Synthetic chat responses follow the prompt type: judge prompts get
//! `yes`/`no`, answer prompts get one of the offered letters, anything else
//! gets short pseudo-stories that reuse words of the question. Synthetic
//! logprobs depend on the preceding word, so word order matters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, GatewayError, GenerationParams, RawToken, RequestCtx};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatRule {
    /// Every string must occur in the prompt.
    pub contains: Vec<String>,
    /// Restricts the rule to one model name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Cycled to fill the requested sample count.
    pub responses: Vec<String>,
}

impl ChatRule {
    pub fn new(contains: &[&str], responses: &[&str]) -> Self {
        Self {
            contains: contains.iter().map(|s| s.to_string()).collect(),
            model: None,
            responses: responses.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn for_model(mut self, model: &str) -> Self {
        self.model = Some(model.to_string());
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreRule {
    pub contains: Vec<String>,
    pub score: f64,
}

impl ScoreRule {
    pub fn new(contains: &[&str], score: f64) -> Self {
        Self {
            contains: contains.iter().map(|s| s.to_string()).collect(),
            score,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbedRule {
    pub contains: Vec<String>,
    pub vector: Vec<f64>,
}

impl EmbedRule {
    pub fn new(contains: &[&str], vector: &[f64]) -> Self {
        Self {
            contains: contains.iter().map(|s| s.to_string()).collect(),
            vector: vector.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LogprobScript {
    /// Word-bigram hash model; order sensitive.
    #[default]
    Synthetic,
    /// Every token gets the same logprob regardless of context.
    Constant { logprob: f64 },
    /// Exact text → per-token logprobs (tokens as in [`mock_tokenize`]).
    Table {
        texts: BTreeMap<String, Vec<f64>>,
        /// Constant logprob for texts missing from the table.
        #[serde(default)]
        fallback: Option<f64>,
    },
}

fn default_embed_dim() -> usize {
    32
}

/// Scripted behaviour of the mock backend, stored as `script.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub chat: Vec<ChatRule>,
    #[serde(default)]
    pub logprobs: LogprobScript,
    #[serde(default)]
    pub scorer: Vec<ScoreRule>,
    #[serde(default)]
    pub embedder: Vec<EmbedRule>,
    /// Dimensionality of synthetic embeddings.
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Share of synthetic judge responses that say "yes".
    #[serde(default = "default_yes_rate")]
    pub judge_yes_rate: f64,
}

fn default_yes_rate() -> f64 {
    0.9
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            chat: vec![],
            logprobs: LogprobScript::Synthetic,
            scorer: vec![],
            embedder: vec![],
            embed_dim: default_embed_dim(),
            judge_yes_rate: default_yes_rate(),
        }
    }
}

#[derive(Debug, Default)]
pub struct MockBackend {
    fixtures_dir: Option<PathBuf>,
    script: MockScript,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Self {
        Self {
            fixtures_dir: None,
            script,
        }
    }

    /// Loads `script.json` from `dir` when present; digest fixtures are read
    /// lazily from the same directory.
    pub fn from_dir(dir: &Path) -> Result<Self, GatewayError> {
        let script_path = dir.join("script.json");
        let script = if script_path.exists() {
            let text = std::fs::read_to_string(&script_path)
                .map_err(|e| GatewayError::Mock(format!("{}: {e}", script_path.display())))?;
            serde_json::from_str(&text).map_err(|e| GatewayError::Mock(format!("{}: {e}", script_path.display())))?
        } else {
            MockScript::default()
        };
        Ok(Self {
            fixtures_dir: Some(dir.to_path_buf()),
            script,
        })
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    fn fixture<T: DeserializeOwned>(&self, digest: &str) -> Result<Option<T>, GatewayError> {
        let Some(dir) = &self.fixtures_dir else {
            return Ok(None);
        };
        let path = dir.join(format!("{digest}.json"));
        if !path.exists() {
            return Ok(None);
        }
        let text =
            std::fs::read_to_string(&path).map_err(|e| GatewayError::Mock(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| GatewayError::Mock(format!("{}: {e}", path.display())))
    }
}

fn matches_all(haystack: &str, needles: &[String]) -> bool {
    needles.iter().all(|n| haystack.contains(n.as_str()))
}

fn hash_u64(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn unit(parts: &[&str]) -> f64 {
    (hash_u64(parts) >> 11) as f64 / (1u64 << 53) as f64
}

/// Splits text into tokens of leading whitespace plus one word; trailing
/// whitespace becomes its own token. Concatenation gives back the text.
pub fn mock_tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    let mut in_word = false;
    for ch in text.chars() {
        if ch.is_whitespace() {
            if in_word {
                tokens.push(std::mem::take(&mut cur));
                in_word = false;
            }
        } else {
            in_word = true;
        }
        cur.push(ch);
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

const JUDGE_MARKER: &str = "Respond with \"yes\" or \"no\" only.";
const ANSWER_MARKER: &str = "by selecting the answer letter";

const SCENES: &[&str] = &[
    "kitchen",
    "office",
    "garden",
    "classroom",
    "market",
    "workshop",
    "library",
    "station",
    "park",
    "clinic",
];
const ACTIONS: &[&str] = &[
    "noticed",
    "remembered",
    "watched",
    "learned",
    "realized",
    "helped",
    "organized",
    "explained",
];
const DETAILS: &[&str] = &[
    "carefully",
    "quietly",
    "after a long day",
    "on a rainy morning",
    "with a friend",
    "before dinner",
];
const NUMBER_WORDS: &[&str] = &[
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
];

fn question_words(prompt: &str) -> Vec<String> {
    let line = prompt
        .lines()
        .find_map(|l| l.strip_prefix("Question: "))
        .unwrap_or(prompt);
    line.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| w.len() > 3)
        .collect()
}

fn synthetic_generation(model: &str, prompt: &str, index: usize) -> String {
    let idx = index.to_string();
    let pick = |salt: &str, list: &[&str]| -> String {
        list[(hash_u64(&[model, prompt, &idx, salt]) % list.len() as u64) as usize].to_string()
    };
    let words = question_words(prompt);
    let topic = if words.is_empty() {
        "something".to_string()
    } else {
        let a = &words[(hash_u64(&[model, prompt, &idx, "w1"]) % words.len() as u64) as usize];
        let b = &words[(hash_u64(&[model, prompt, &idx, "w2"]) % words.len() as u64) as usize];
        if a == b {
            a.clone()
        } else {
            format!("{a} and {b}")
        }
    };
    format!(
        "Once in the {} I {} something about {} {}. It seemed like the usual way things are done in the {}.",
        pick("scene", SCENES),
        pick("action", ACTIONS),
        topic,
        pick("detail", DETAILS),
        pick("scene2", SCENES),
    )
}

fn offered_labels(prompt: &str) -> Vec<String> {
    let tail = prompt.rsplit("anything else: ").next().unwrap_or(prompt);
    let re = Regex::new(r"(?:^|\s)([A-H])\. ").expect("static regex");
    let mut labels: Vec<String> = re.captures_iter(tail).map(|c| c[1].to_string()).collect();
    labels.dedup();
    labels
}

impl MockScript {
    fn chat(&self, model: &str, prompt: &str, params: &GenerationParams) -> Vec<String> {
        if let Some(rule) = self
            .chat
            .iter()
            .find(|r| matches_all(prompt, &r.contains) && r.model.as_deref().is_none_or(|m| m == model))
        {
            if !rule.responses.is_empty() {
                return (0..params.n_samples)
                    .map(|i| rule.responses[i % rule.responses.len()].clone())
                    .collect();
            }
        }
        (0..params.n_samples)
            .map(|i| {
                let idx = i.to_string();
                if prompt.contains(JUDGE_MARKER) {
                    if unit(&[model, prompt, &idx, "judge"]) < self.judge_yes_rate {
                        "yes".into()
                    } else {
                        "no".into()
                    }
                } else if prompt.contains(ANSWER_MARKER) {
                    let labels = offered_labels(prompt);
                    if labels.is_empty() {
                        NUMBER_WORDS[(hash_u64(&[model, prompt, &idx]) % NUMBER_WORDS.len() as u64) as usize]
                            .to_string()
                    } else {
                        labels[(hash_u64(&[model, prompt, &idx]) % labels.len() as u64) as usize].clone()
                    }
                } else {
                    synthetic_generation(model, prompt, i)
                }
            })
            .collect()
    }

    fn logprobs(&self, model: &str, text: &str) -> Result<Vec<RawToken>, GatewayError> {
        let tokens = mock_tokenize(text);
        let values: Vec<f64> = match &self.logprobs {
            LogprobScript::Constant { logprob } => vec![*logprob; tokens.len()],
            LogprobScript::Table { texts, fallback } => match (texts.get(text), fallback) {
                (Some(v), _) => {
                    if v.len() != tokens.len() {
                        return Err(GatewayError::Mock(format!(
                            "table entry for {text:?} has {} logprobs for {} tokens",
                            v.len(),
                            tokens.len()
                        )));
                    }
                    v.clone()
                }
                (None, Some(c)) => vec![*c; tokens.len()],
                (None, None) => return Err(GatewayError::Mock(format!("no logprob table entry for {text:?}"))),
            },
            LogprobScript::Synthetic => {
                let mut prev = "<s>".to_string();
                tokens
                    .iter()
                    .map(|t| {
                        let w = t.trim().to_lowercase();
                        let u = unit(&[model, &prev, &w]);
                        prev = w;
                        (0.02 + 0.96 * u).ln()
                    })
                    .collect()
            }
        };
        Ok(tokens
            .into_iter()
            .zip(values)
            .map(|(text, lp)| RawToken {
                text,
                logprob: Some(lp),
            })
            .collect())
    }

    fn score(&self, text: &str) -> f64 {
        match self.scorer.iter().find(|r| matches_all(text, &r.contains)) {
            Some(r) => r.score,
            None => 0.3 + 0.65 * unit(&[text, "commonsense"]),
        }
    }

    /// Bag-of-words hashing vector with a constant bias component, so
    /// texts sharing words have higher cosine and no vector is zero.
    fn embed(&self, text: &str) -> Vec<f64> {
        if let Some(r) = self.embedder.iter().find(|r| matches_all(text, &r.contains)) {
            return r.vector.clone();
        }
        let dim = self.embed_dim.max(2);
        let mut v = vec![0.0; dim];
        v[0] = 0.5;
        for w in text.split_whitespace() {
            let w = w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
            if w.len() < 3 {
                continue;
            }
            v[1 + (hash_u64(&[&w]) % (dim as u64 - 1)) as usize] += 1.0;
        }
        v
    }
}

impl Backend for MockBackend {
    fn name(&self) -> &'static str {
        "mock"
    }

    fn chat(&self, ctx: &RequestCtx<'_>, prompt: &str, params: &GenerationParams) -> Result<Vec<String>, GatewayError> {
        if let Some(v) = self.fixture(ctx.digest)? {
            return Ok(v);
        }
        Ok(self.script.chat(&ctx.endpoint.model_name, prompt, params))
    }

    fn score_tokens(&self, ctx: &RequestCtx<'_>, text: &str) -> Result<Vec<RawToken>, GatewayError> {
        if let Some(v) = self.fixture(ctx.digest)? {
            return Ok(v);
        }
        self.script.logprobs(&ctx.endpoint.model_name, text)
    }

    fn commonsense(&self, ctx: &RequestCtx<'_>, text: &str) -> Result<f64, GatewayError> {
        if let Some(v) = self.fixture(ctx.digest)? {
            return Ok(v);
        }
        Ok(self.script.score(text))
    }

    fn embed(&self, ctx: &RequestCtx<'_>, text: &str) -> Result<Vec<f64>, GatewayError> {
        if let Some(v) = self.fixture(ctx.digest)? {
            return Ok(v);
        }
        Ok(self.script.embed(text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_reconstructs() {
        for text in ["a b", "  lead", "trail  ", "one\ntwo\n\nthree", "x"] {
            assert_eq!(mock_tokenize(text).concat(), text);
        }
        assert_eq!(mock_tokenize("a b"), vec!["a", " b"]);
    }

    #[test]
    fn labels_from_answer_prompt() {
        let p = "Choose ... do not say anything else: Where? A. x, B. y z, C. w.";
        assert_eq!(offered_labels(p), vec!["A", "B", "C"]);
    }

    #[test]
    fn synthetic_answers_are_valid_labels() {
        let s = MockScript::default();
        let p = "Choose the most suitable answer for the question by selecting the answer letter and do not say anything else: Q? A. x, B. y.";
        let out = s.chat("m", p, &GenerationParams::greedy(4));
        assert!(out[0] == "A" || out[0] == "B");
    }

    #[test]
    fn synthetic_stories_vary_by_model_and_index() {
        let s = MockScript::default();
        let p = "Jane is answering this question: \nQuestion: Where do adults use glue sticks?";
        let params = GenerationParams {
            temperature: 1.0,
            n_samples: 5,
            max_tokens: 100,
            seed: None,
        };
        let a = s.chat("m1", p, &params);
        let b = s.chat("m2", p, &params);
        assert_ne!(a, b);
        assert_eq!(a, s.chat("m1", p, &params));
    }

    #[test]
    fn fixture_file_wins() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("deadbeef.json"), r#"["from-fixture"]"#).unwrap();
        let b = MockBackend::from_dir(dir.path()).unwrap();
        let ep = super::super::ModelEndpoint::mock("m", "x");
        let ctx = RequestCtx {
            endpoint: &ep,
            digest: "deadbeef",
        };
        assert_eq!(
            b.chat(&ctx, "anything", &GenerationParams::greedy(4)).unwrap(),
            vec!["from-fixture"]
        );
    }
}
