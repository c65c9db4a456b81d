//! One function per CLI stage. A [`Session`] holds the run lock, the
//! connected endpoints and the manifest for the duration of one command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::analytics::AnalyticsError;
use crate::artifacts::{read_jsonl, write_json, write_jsonl, ArtifactError};
use crate::corpus::{load_dataset, sample_questions, CorpusError, QuestionRecord};
use crate::elicit::{
    generate_batch, judge_record, select_one_per_question, ElicitError, Expression, Judgment, Verdict,
};
use crate::gateway::{map_ordered, BackendRegistry, Endpoint, GatewayError, GatewayOptions};
use crate::perplexity::{
    contextual_pr, perplexity_reduction, ContextualMode, PerplexityError, PrRecord, ShuffleConfig,
};
use crate::prompting::{AnswerContext, Condition, ExpressionKind, Prompter};
use crate::qa::{answer, AnswerRecord, QaError};
use crate::rng::seed_for_label;
use crate::run::{Config, RunError, RunLayout, RunLock, RunManifest, StageEntry};
use crate::scoring::{score_story, ScoredStory, ScoringError};
use crate::selfsft::{
    run_loop, run_naive_sft, FilterConfig, IterationState, LoopContext, SelfSftError, StrategyRegistry, TrainerRegistry,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0} (run the stage that produces it first)")]
    MissingArtifact(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Artifact(ArtifactError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Elicit(#[from] ElicitError),
    #[error(transparent)]
    Perplexity(#[from] PerplexityError),
    #[error(transparent)]
    Qa(#[from] QaError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    SelfSft(#[from] SelfSftError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

impl From<ArtifactError> for PipelineError {
    fn from(e: ArtifactError) -> Self {
        match e {
            ArtifactError::Missing(p) => Self::MissingArtifact(format!("missing artifact {}", p.display())),
            other => Self::Artifact(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Generator,
    Answerer,
    Judge,
    Lm,
    Scorer,
    Embedder,
}

pub struct Session {
    pub layout: RunLayout,
    pub config: Config,
    pub prompter: Prompter,
    endpoints: BTreeMap<String, Endpoint>,
    overrides: BTreeMap<Role, String>,
    manifest: RunManifest,
    config_digest: String,
    _lock: RunLock,
}

impl Session {
    /// Locks the run directory, connects every configured endpoint with the
    /// run's response cache and loads (or starts) the manifest.
    pub fn open(layout: RunLayout, config: Config) -> Result<Self, PipelineError> {
        Self::open_with(layout, config, &BackendRegistry::default())
    }

    pub fn open_with(layout: RunLayout, config: Config, backends: &BackendRegistry) -> Result<Self, PipelineError> {
        config.validate()?;
        let lock = RunLock::acquire(&layout)?;
        let opts = GatewayOptions {
            cache_dir: Some(layout.cache()),
            mock_dir: config.mock_dir.clone(),
            ..Default::default()
        };
        let mut endpoints = BTreeMap::new();
        for (id, spec) in &config.endpoints {
            endpoints.insert(id.clone(), backends.connect(spec.clone(), &opts)?);
        }
        let prompter = Prompter::new(config.persona.clone());
        let config_digest = config.digest();
        let manifest = match RunManifest::load(&layout.manifest())? {
            Some(m) => m,
            None => RunManifest {
                run_id: layout.run_id(),
                created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                config_digest: config_digest.clone(),
                seeds: BTreeMap::from([("seed".to_string(), config.seed)]),
                endpoints: config.endpoints.values().map(|e| e.descriptor()).collect(),
                prompt_digest: prompter.templates_digest(),
                stages: Vec::new(),
                iteration: None,
            },
        };
        Ok(Self {
            layout,
            config,
            prompter,
            endpoints,
            overrides: BTreeMap::new(),
            manifest,
            config_digest,
            _lock: lock,
        })
    }

    /// Serves `role` from endpoint `id` for this session only.
    pub fn override_role(&mut self, role: Role, id: &str) -> Result<(), PipelineError> {
        if !self.endpoints.contains_key(id) {
            return Err(PipelineError::Invalid(format!("unknown endpoint {id:?}")));
        }
        self.overrides.insert(role, id.to_string());
        Ok(())
    }

    pub fn endpoint(&self, role: Role) -> &Endpoint {
        let r = &self.config.roles;
        let id = self.overrides.get(&role).unwrap_or(match role {
            Role::Generator => &r.generator,
            Role::Answerer => &r.answerer,
            Role::Judge => &r.judge,
            Role::Lm => &r.lm,
            Role::Scorer => &r.scorer,
            Role::Embedder => &r.embedder,
        });
        &self.endpoints[id]
    }

    /// Calls that reached a backend (cache misses) in this session.
    pub fn backend_calls(&self) -> u64 {
        self.endpoints.values().map(Endpoint::backend_calls).sum()
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn config_digest(&self) -> &str {
        &self.config_digest
    }

    /// Appends a stage entry with current digests and saves the manifest.
    pub fn record(
        &mut self,
        stage: &str,
        params: serde_json::Value,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        iteration: Option<usize>,
    ) -> Result<(), PipelineError> {
        let refs = |paths: &[PathBuf]| -> Result<Vec<_>, RunError> {
            paths.iter().map(|p| self.layout.artifact_ref(p)).collect()
        };
        let entry = StageEntry {
            stage: stage.to_string(),
            config_digest: self.config_digest.clone(),
            params,
            inputs: refs(inputs)?,
            outputs: refs(outputs)?,
            iteration,
        };
        if self.manifest.record(entry) || !self.layout.manifest().exists() {
            self.manifest.save(&self.layout.manifest())?;
        }
        Ok(())
    }

    fn endpoint_params(&self, role: Role) -> serde_json::Value {
        let e = self.endpoint(role).spec();
        json!({"endpoint": e.endpoint_id, "model": e.model_name})
    }

    /// Sampled questions if present, else the full ingested dataset.
    pub fn questions_path(&self, dataset: &str) -> Result<PathBuf, PipelineError> {
        let sampled = self.layout.questions(dataset);
        if sampled.exists() {
            return Ok(sampled);
        }
        let full = self.layout.dataset(dataset);
        if full.exists() {
            return Ok(full);
        }
        Err(PipelineError::MissingArtifact(format!(
            "missing artifact {} (no ingested dataset {dataset:?})",
            full.display()
        )))
    }

    pub fn questions(&self, dataset: &str) -> Result<(PathBuf, Vec<QuestionRecord>), PipelineError> {
        let path = self.questions_path(dataset)?;
        let qs = read_jsonl(&path)?;
        Ok((path, qs))
    }

    fn expressions(&self, dataset: &str, kind: ExpressionKind) -> Result<(PathBuf, Vec<Expression>), PipelineError> {
        let path = self.layout.expressions(dataset, kind.as_str());
        let exprs = read_jsonl(&path)?;
        Ok((path, exprs))
    }

    fn workers(&self, role: Role) -> usize {
        self.endpoint(role).max_in_flight()
    }
}

/// Reads a source file into `datasets/<id>.jsonl` plus its manifest.
pub fn ingest(
    s: &mut Session,
    input: &Path,
    format: &str,
    dataset: Option<&str>,
) -> Result<Vec<PathBuf>, PipelineError> {
    let (records, manifest) = load_dataset(input, format, dataset)?;
    let id = manifest.dataset_id.clone();
    if let Some(other) = records.iter().find(|r| r.dataset_id != id) {
        return Err(PipelineError::Invalid(format!(
            "{} mixes datasets {id:?} and {:?}; pass --dataset or split the file",
            input.display(),
            other.dataset_id
        )));
    }
    let out = s.layout.dataset(&id);
    let man = s.layout.dataset_manifest(&id);
    write_jsonl(&out, &records)?;
    write_json(&man, &manifest)?;
    let source_digest = crate::artifacts::file_digest(input)?;
    s.record(
        "ingest",
        json!({"dataset": id, "format": format, "source": input.display().to_string(), "source_digest": source_digest}),
        &[],
        &[out.clone(), man.clone()],
        None,
    )?;
    Ok(vec![out, man])
}

pub fn sample(s: &mut Session, dataset: &str, n: usize) -> Result<PathBuf, PipelineError> {
    let input = s.layout.dataset(dataset);
    let all: Vec<QuestionRecord> = read_jsonl(&input)?;
    let picked = sample_questions(&all, n, s.config.seed)?;
    let out = s.layout.questions(dataset);
    write_jsonl(&out, &picked)?;
    s.record(
        "sample",
        json!({"dataset": dataset, "n": n, "seed": s.config.seed}),
        &[input],
        std::slice::from_ref(&out),
        None,
    )?;
    Ok(out)
}

pub fn elicit(s: &mut Session, dataset: &str, kind: ExpressionKind) -> Result<Vec<PathBuf>, PipelineError> {
    let (input, qs) = s.questions(dataset)?;
    let generated = generate_batch(&s.prompter, &qs, kind, s.endpoint(Role::Generator), s.config.n_stories)?;
    let out = s.layout.expressions(dataset, kind.as_str());
    let excl = s.layout.exclusions(dataset, kind.as_str());
    write_jsonl(&out, &generated.expressions)?;
    write_jsonl(&excl, &generated.exclusions)?;
    let mut params = s.endpoint_params(Role::Generator);
    params["dataset"] = json!(dataset);
    params["kind"] = json!(kind.as_str());
    params["n"] = json!(s.config.n_stories);
    s.record("elicit", params, &[input], &[out.clone(), excl.clone()], None)?;
    Ok(vec![out, excl])
}

/// Judges one randomly chosen expression per question. Unparseable
/// responses are kept with an `unparseable` verdict.
pub fn judge(s: &mut Session, dataset: &str, kind: ExpressionKind) -> Result<PathBuf, PipelineError> {
    let (input, exprs) = s.expressions(dataset, kind)?;
    let seed = seed_for_label(s.config.seed, "judge");
    let chosen = select_one_per_question(&exprs, seed);
    let judge_ep = s.endpoint(Role::Judge);
    let results = map_ordered(&chosen, s.workers(Role::Judge), |e| {
        judge_record(&s.prompter, e, judge_ep)
    });
    let judgments = results.into_iter().collect::<Result<Vec<Judgment>, _>>()?;
    let bad = judgments.iter().filter(|j| j.verdict == Verdict::Unparseable).count();
    if bad > 0 {
        log::warn!("{dataset}/{kind}: {bad} unparseable judgments kept and excluded from accuracy");
    }
    let out = s.layout.judgments(dataset, kind.as_str());
    write_jsonl(&out, &judgments)?;
    let mut params = s.endpoint_params(Role::Judge);
    params["dataset"] = json!(dataset);
    params["kind"] = json!(kind.as_str());
    params["selection_seed"] = json!(seed);
    s.record("judge", params, &[input], std::slice::from_ref(&out), None)?;
    Ok(out)
}

fn pr_seed(base: u64, prefix: &str, expression_id: &str) -> u64 {
    seed_for_label(base, &format!("{prefix}:{expression_id}"))
}

pub fn pr(s: &mut Session, dataset: &str, kind: ExpressionKind) -> Result<PathBuf, PipelineError> {
    let (input, exprs) = s.expressions(dataset, kind)?;
    let lm = s.endpoint(Role::Lm);
    let (n, seed) = (s.config.n_shuffles, s.config.seed);
    let results = map_ordered(&exprs, s.workers(Role::Lm), |e| -> Result<PrRecord, PerplexityError> {
        let cfg = ShuffleConfig::new(n, pr_seed(seed, "pr", &e.expression_id));
        Ok(PrRecord {
            expression_id: e.expression_id.clone(),
            question_id: e.question_id.clone(),
            kind: e.kind,
            measurement: perplexity_reduction(&e.text, lm, &cfg)?,
        })
    });
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let out = s.layout.pr(dataset, kind.as_str());
    write_jsonl(&out, &rows)?;
    let mut params = s.endpoint_params(Role::Lm);
    params["dataset"] = json!(dataset);
    params["kind"] = json!(kind.as_str());
    params["n_shuffles"] = json!(n);
    s.record("pr", params, &[input], std::slice::from_ref(&out), None)?;
    Ok(out)
}

/// The question part of a contextual measurement: question text plus the
/// options line when there are options.
pub fn question_part(q: &QuestionRecord) -> String {
    if q.options.is_empty() {
        q.question_text.clone()
    } else {
        format!("{} {}", q.question_text, q.options_line())
    }
}

pub fn contextual(
    s: &mut Session,
    dataset: &str,
    kind: ExpressionKind,
    mode: ContextualMode,
) -> Result<PathBuf, PipelineError> {
    let (qpath, qs) = s.questions(dataset)?;
    let (epath, exprs) = s.expressions(dataset, kind)?;
    let by_id: BTreeMap<&str, &QuestionRecord> = qs.iter().map(|q| (q.question_id.as_str(), q)).collect();
    let lm = s.endpoint(Role::Lm);
    let (n, seed) = (s.config.n_shuffles, s.config.seed);
    let results = map_ordered(&exprs, s.workers(Role::Lm), |e| -> Result<PrRecord, PipelineError> {
        let q = by_id
            .get(e.question_id.as_str())
            .ok_or_else(|| PipelineError::Invalid(format!("expression {} names unknown question", e.expression_id)))?;
        let cfg = ShuffleConfig::new(n, pr_seed(seed, "cpr", &e.expression_id));
        Ok(PrRecord {
            expression_id: e.expression_id.clone(),
            question_id: e.question_id.clone(),
            kind: e.kind,
            measurement: contextual_pr(&e.text, &question_part(q), &q.gold_answer_text(), lm, &cfg, mode)?,
        })
    });
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let out = s.layout.contextual_pr(dataset, kind.as_str(), mode.as_str());
    write_jsonl(&out, &rows)?;
    let mut params = s.endpoint_params(Role::Lm);
    params["dataset"] = json!(dataset);
    params["kind"] = json!(kind.as_str());
    params["mode"] = json!(mode.as_str());
    params["n_shuffles"] = json!(n);
    s.record(
        "contextual-pr",
        params,
        &[qpath, epath],
        std::slice::from_ref(&out),
        None,
    )?;
    Ok(out)
}

fn texts_by_question(exprs: &[Expression]) -> BTreeMap<String, Vec<String>> {
    let mut sorted: Vec<&Expression> = exprs.iter().collect();
    sorted.sort_by(|a, b| (&a.question_id, a.sample_index).cmp(&(&b.question_id, b.sample_index)));
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for e in sorted {
        out.entry(e.question_id.clone()).or_default().push(e.text.clone());
    }
    out
}

/// Answers every question under one condition; story and rule contexts are
/// all of the question's expressions in sample order.
pub fn answer_stage(s: &mut Session, dataset: &str, condition: Condition) -> Result<PathBuf, PipelineError> {
    let (qpath, qs) = s.questions(dataset)?;
    let mut inputs = vec![qpath];
    let mut load = |kind: ExpressionKind| -> Result<BTreeMap<String, Vec<String>>, PipelineError> {
        let (p, e) = s.expressions(dataset, kind)?;
        inputs.push(p);
        Ok(texts_by_question(&e))
    };
    let stories = matches!(condition, Condition::Story | Condition::Both)
        .then(|| load(ExpressionKind::Story))
        .transpose()?;
    let rules = matches!(condition, Condition::Rule | Condition::Both)
        .then(|| load(ExpressionKind::Rule))
        .transpose()?;
    let empty = Vec::new();
    let lookup = |m: &Option<BTreeMap<String, Vec<String>>>, id: &str| -> Vec<String> {
        m.as_ref().and_then(|m| m.get(id)).unwrap_or(&empty).clone()
    };
    let ep = s.endpoint(Role::Answerer);
    let temp = s.config.temperature_answer;
    let results = map_ordered(
        &qs,
        s.workers(Role::Answerer),
        |q| -> Result<AnswerRecord, PipelineError> {
            let st = lookup(&stories, &q.question_id);
            let ru = lookup(&rules, &q.question_id);
            let ctx = match condition {
                Condition::Base => AnswerContext::None,
                Condition::Story => AnswerContext::Stories(&st),
                Condition::Rule => AnswerContext::Rules(&ru),
                Condition::Both => AnswerContext::Both {
                    stories: &st,
                    rules: &ru,
                },
            };
            answer(&s.prompter, q, ctx, ep, temp)
                .map_err(|e| PipelineError::Invalid(format!("question {}: {e}", q.question_id)))
        },
    );
    let records = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let out = s.layout.answers(dataset, condition.as_str());
    write_jsonl(&out, &records)?;
    let mut params = s.endpoint_params(Role::Answerer);
    params["dataset"] = json!(dataset);
    params["condition"] = json!(condition.as_str());
    params["temperature"] = json!(temp);
    s.record("answer", params, &inputs, std::slice::from_ref(&out), None)?;
    Ok(out)
}

/// Scores every story of the dataset.
pub fn score(s: &mut Session, dataset: &str) -> Result<PathBuf, PipelineError> {
    let (qpath, qs) = s.questions(dataset)?;
    let (epath, exprs) = s.expressions(dataset, ExpressionKind::Story)?;
    let by_id: BTreeMap<&str, &QuestionRecord> = qs.iter().map(|q| (q.question_id.as_str(), q)).collect();
    let (scorer, embedder) = (s.endpoint(Role::Scorer), s.endpoint(Role::Embedder));
    let workers = s.workers(Role::Scorer).max(s.workers(Role::Embedder));
    let results = map_ordered(&exprs, workers, |e| -> Result<ScoredStory, PipelineError> {
        let q = by_id
            .get(e.question_id.as_str())
            .ok_or_else(|| PipelineError::Invalid(format!("expression {} names unknown question", e.expression_id)))?;
        Ok(score_story(e, q, scorer, embedder)?)
    });
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let out = s.layout.scores(dataset);
    write_jsonl(&out, &rows)?;
    let mut params = json!({"dataset": dataset});
    params["scorer"] = s.endpoint_params(Role::Scorer);
    params["embedder"] = s.endpoint_params(Role::Embedder);
    s.record("score", params, &[qpath, epath], std::slice::from_ref(&out), None)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopKind {
    /// Top-K% by score over several iterations.
    Ranked,
    /// One iteration keeping every helpful story.
    Naive,
}

#[derive(Debug, Clone, Serialize)]
struct LoopParams<'a> {
    kind: &'a str,
    strategy: &'a str,
    trainer: &'a str,
    iterations: usize,
    filter: &'a FilterConfig,
}

/// Runs the self-training loop over the full ingested seen datasets. The
/// output directory is cleared first so reruns leave no stale files.
pub fn selfsft(s: &mut Session, kind: LoopKind, datasets: &[String]) -> Result<Vec<IterationState>, PipelineError> {
    let settings = s.config.selfsft.clone();
    let seen = if datasets.is_empty() {
        settings.seen_datasets.clone()
    } else {
        datasets.to_vec()
    };
    if seen.is_empty() {
        return Err(PipelineError::Invalid(
            "no seen datasets (pass --dataset or set selfsft.seen_datasets)".into(),
        ));
    }
    let mut questions = Vec::new();
    let mut inputs = Vec::new();
    for d in &seen {
        let p = s.layout.dataset(d);
        questions.extend(read_jsonl::<QuestionRecord>(&p)?);
        inputs.push(p);
    }
    let cfg = FilterConfig {
        k_percent: settings.k,
        seen_datasets: seen,
        questions_per_dataset: settings.questions_per_dataset,
        seed: s.config.seed,
        n_stories: s.config.n_stories,
        trajectory_questions: settings.trajectory_questions,
    };
    let trainer = TrainerRegistry::default().create(&settings.trainer, &settings.trainer_command)?;
    let strategies = StrategyRegistry::default();
    let (out_dir, strategy, iterations) = match kind {
        LoopKind::Ranked => (
            s.layout.selfsft(),
            strategies.get(&settings.strategy)?,
            settings.iterations,
        ),
        LoopKind::Naive => (s.layout.selfsft_naive(), strategies.get("helpful")?, 1),
    };
    if out_dir.exists() {
        std::fs::remove_dir_all(&out_dir).map_err(|source| RunError::Io {
            path: out_dir.clone(),
            source,
        })?;
    }
    let ctx = LoopContext {
        prompter: &s.prompter,
        generator: s.endpoint(Role::Generator),
        answerer: s.endpoint(Role::Answerer),
        scorer: s.endpoint(Role::Scorer),
        embedder: s.endpoint(Role::Embedder),
        questions: &questions,
        answer_temperature: s.config.temperature_answer,
    };
    let states = match kind {
        LoopKind::Ranked => run_loop(&ctx, &cfg, strategy, trainer.as_ref(), iterations, &out_dir)?,
        LoopKind::Naive => run_naive_sft(&ctx, &cfg, trainer.as_ref(), &out_dir)?,
    };
    let outputs = s.layout.files_under(&out_dir);
    let params = serde_json::to_value(LoopParams {
        kind: match kind {
            LoopKind::Ranked => "run",
            LoopKind::Naive => "naive",
        },
        strategy: strategy.name(),
        trainer: trainer.name(),
        iterations,
        filter: &cfg,
    })
    .expect("params serialize");
    let last = states.last().map(|st| st.iteration);
    s.record("selfsft", params, &inputs, &outputs, last)?;
    Ok(states)
}
