//! Iterative self-supervised fine-tuning: generate stories with the
//! current model, keep the ones that fix a wrong answer, rank them, export
//! instruction/output pairs and train the next model.
//!
//! Files under the output directory:
//!
//! ```text
//! split.json            per-dataset eval / train / search orders, fixed once
//! baseline.json         iteration 0 (the untuned model)
//! iter-<i>/helpful.jsonl
//! iter-<i>/scores.jsonl (strategies that rank by score)
//! iter-<i>/sft.jsonl
//! iter-<i>/trainer/     trainer output dir with result.json
//! state-<i>.json
//! ```

mod filter;
mod trainer;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifacts::{to_json_pretty, write_json, write_jsonl, ArtifactError};
use crate::corpus::QuestionRecord;
use crate::digest::{json_digest, sha256_hex};
use crate::elicit::{generate_expressions, ElicitError, Expression};
use crate::gateway::{map_ordered, Endpoint};
use crate::prompting::{AnswerContext, ExpressionKind, Prompter};
use crate::qa::{answer, AnswerRecord, QaError};
use crate::rng::{seed_for_label, SplitMix64};
use crate::scoring::{score_story, ScoredStory, ScoringError};

pub use filter::{filter_topk, retain_count, validate_k, AllHelpful, SelectionStrategy, StrategyRegistry, TopK};
pub use trainer::{CommandTrainer, StubTrainer, TrainJob, TrainResult, Trainer, TrainerRegistry};

#[derive(Debug, Error)]
pub enum SelfSftError {
    #[error("k_percent must be in (0, 100], got {0}")]
    InvalidK(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown {0}")]
    Unknown(String),
    #[error("iteration {0}: no helpful stories found")]
    NoHelpful(usize),
    #[error("nothing to train on")]
    NothingToTrain,
    #[error("unknown question {0}")]
    UnknownQuestion(String),
    #[error("unknown expression {0}")]
    UnknownExpression(String),
    #[error("no iteration states")]
    NoStates,
    #[error("trainer failed: {0}")]
    Trainer(String),
    #[error(transparent)]
    Qa(#[from] QaError),
    #[error(transparent)]
    Elicit(#[from] ElicitError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub k_percent: f64,
    pub seen_datasets: Vec<String>,
    /// Questions per dataset that must end up with a helpful story.
    pub questions_per_dataset: usize,
    pub seed: u64,
    pub n_stories: usize,
    /// Questions per dataset in each of the train and eval score samples.
    pub trajectory_questions: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            k_percent: 50.0,
            seen_datasets: Vec::new(),
            questions_per_dataset: 200,
            seed: 0,
            n_stories: 5,
            trajectory_questions: 20,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), SelfSftError> {
        validate_k(self.k_percent)?;
        let bad = |m: &str| Err(SelfSftError::InvalidConfig(m.to_string()));
        if self.seen_datasets.is_empty() {
            return bad("no seen datasets");
        }
        if self.questions_per_dataset == 0 {
            return bad("questions_per_dataset must be at least 1");
        }
        if self.n_stories == 0 {
            return bad("n_stories must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub question_id: String,
    pub expression_id: String,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub instruction: String,
    pub output: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationState {
    pub iteration: usize,
    pub model_ref: String,
    pub train_example_count: usize,
    pub mean_total_score_train: f64,
    pub mean_total_score_eval: f64,
    /// Digest of the previous state file (of `split.json` for iteration 0).
    pub manifest_ref: String,
    pub strategy: String,
    pub k_percent: f64,
    pub helpful_pool_size: usize,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub dataset_id: String,
    /// Held-out questions for eval scores.
    pub eval: Vec<String>,
    /// Search order for helpful stories; its head is the train score sample.
    pub pool: Vec<String>,
    pub train: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub datasets: Vec<DatasetSplit>,
}

/// Fixes, per seen dataset, a seeded question order: the first
/// `trajectory_questions` (at most half) are held out, the rest form the
/// search pool whose head is the train score sample.
pub fn make_split(questions: &[QuestionRecord], cfg: &FilterConfig) -> Result<Split, SelfSftError> {
    cfg.validate()?;
    let mut datasets = Vec::new();
    for d in &cfg.seen_datasets {
        let mut ids: Vec<String> = questions
            .iter()
            .filter(|q| &q.dataset_id == d)
            .map(|q| q.question_id.clone())
            .collect();
        if ids.len() < 2 {
            return Err(SelfSftError::InvalidConfig(format!(
                "seen dataset {d} needs at least 2 questions, has {}",
                ids.len()
            )));
        }
        SplitMix64::new(seed_for_label(cfg.seed, &format!("split:{d}"))).shuffle(&mut ids);
        let t = cfg.trajectory_questions.min(ids.len() / 2);
        let pool = ids.split_off(t);
        let train = pool.iter().take(t).cloned().collect();
        datasets.push(DatasetSplit {
            dataset_id: d.clone(),
            eval: ids,
            pool,
            train,
        });
    }
    Ok(Split {
        seed: cfg.seed,
        datasets,
    })
}

/// Models and services one loop run talks to.
pub struct LoopContext<'a> {
    pub prompter: &'a Prompter,
    /// Story generator; its model is swapped for each state's `model_ref`.
    pub generator: &'a Endpoint,
    /// Fixed answerer deciding helpfulness.
    pub answerer: &'a Endpoint,
    pub scorer: &'a Endpoint,
    pub embedder: &'a Endpoint,
    pub questions: &'a [QuestionRecord],
    pub answer_temperature: f64,
}

impl LoopContext<'_> {
    fn question(&self, id: &str) -> Result<&QuestionRecord, SelfSftError> {
        self.questions
            .iter()
            .find(|q| q.question_id == id)
            .ok_or_else(|| SelfSftError::UnknownQuestion(id.to_string()))
    }

    fn workers(&self) -> usize {
        self.answerer.max_in_flight().max(self.generator.max_in_flight())
    }
}

/// Stories that turn a wrong base answer into a right one when used alone
/// as context. Empty when the base answer is already correct.
pub fn find_helpful(
    prompter: &Prompter,
    q: &QuestionRecord,
    base: &AnswerRecord,
    stories: &[Expression],
    answerer: &Endpoint,
    temperature: f64,
) -> Result<Vec<Expression>, SelfSftError> {
    if base.correct == Some(true) {
        return Ok(Vec::new());
    }
    let mut helpful = Vec::new();
    for s in stories {
        let one = [s.text.clone()];
        let r = answer(prompter, q, AnswerContext::Stories(&one), answerer, temperature)?;
        if r.correct == Some(true) {
            helpful.push(s.clone());
        }
    }
    Ok(helpful)
}

/// One SFT example per retained story, in retained order.
pub fn build_sft_examples(
    prompter: &Prompter,
    retained: &[String],
    expressions: &[Expression],
    questions: &[QuestionRecord],
    iteration: usize,
) -> Result<Vec<SftExample>, SelfSftError> {
    let by_id: BTreeMap<&str, &Expression> = expressions.iter().map(|e| (e.expression_id.as_str(), e)).collect();
    let qs: BTreeMap<&str, &QuestionRecord> = questions.iter().map(|q| (q.question_id.as_str(), q)).collect();
    retained
        .iter()
        .map(|id| {
            let e = by_id
                .get(id.as_str())
                .ok_or_else(|| SelfSftError::UnknownExpression(id.clone()))?;
            let q = qs
                .get(e.question_id.as_str())
                .ok_or_else(|| SelfSftError::UnknownQuestion(e.question_id.clone()))?;
            Ok(SftExample {
                instruction: prompter.generation(q, ExpressionKind::Story),
                output: e.text.clone(),
                provenance: Provenance {
                    question_id: q.question_id.clone(),
                    expression_id: e.expression_id.clone(),
                    iteration,
                },
            })
        })
        .collect()
}

/// Writes the examples as JSONL; an empty list is an error.
pub fn export_sft(examples: &[SftExample], path: &Path) -> Result<PathBuf, SelfSftError> {
    if examples.is_empty() {
        return Err(SelfSftError::NothingToTrain);
    }
    write_jsonl(path, examples)?;
    Ok(path.to_path_buf())
}

fn stories_for(
    ctx: &LoopContext<'_>,
    generator: &Endpoint,
    q: &QuestionRecord,
    n: usize,
) -> Result<Vec<Expression>, SelfSftError> {
    Ok(generate_expressions(ctx.prompter, q, ExpressionKind::Story, generator, n)?.expressions)
}

/// Mean total score of freshly generated stories over the given questions.
fn mean_total(ctx: &LoopContext<'_>, generator: &Endpoint, ids: &[String], n: usize) -> Result<f64, SelfSftError> {
    let per_question = map_ordered(ids, ctx.workers(), |id| -> Result<Vec<f64>, SelfSftError> {
        let q = ctx.question(id)?;
        stories_for(ctx, generator, q, n)?
            .iter()
            .map(|s| Ok(score_story(s, q, ctx.scorer, ctx.embedder)?.total))
            .collect()
    });
    let mut totals = Vec::new();
    for r in per_question {
        totals.extend(r?);
    }
    Ok(if totals.is_empty() {
        0.0
    } else {
        totals.iter().sum::<f64>() / totals.len() as f64
    })
}

/// Walks one dataset's pool in order until `questions_per_dataset`
/// questions have at least one helpful story.
fn search_dataset(
    ctx: &LoopContext<'_>,
    cfg: &FilterConfig,
    generator: &Endpoint,
    split: &DatasetSplit,
) -> Result<Vec<Expression>, SelfSftError> {
    let mut helpful = Vec::new();
    let mut found = 0usize;
    for chunk in split.pool.chunks(ctx.workers()) {
        let results = map_ordered(chunk, ctx.workers(), |id| -> Result<Vec<Expression>, SelfSftError> {
            let q = ctx.question(id)?;
            let base = answer(
                ctx.prompter,
                q,
                AnswerContext::None,
                ctx.answerer,
                ctx.answer_temperature,
            )?;
            if base.correct == Some(true) {
                return Ok(Vec::new());
            }
            let stories = stories_for(ctx, generator, q, cfg.n_stories)?;
            find_helpful(ctx.prompter, q, &base, &stories, ctx.answerer, ctx.answer_temperature)
        });
        for r in results {
            let h = r?;
            if !h.is_empty() {
                helpful.extend(h);
                found += 1;
                if found == cfg.questions_per_dataset {
                    return Ok(helpful);
                }
            }
        }
    }
    log::warn!(
        "{}: only {found} of {} questions have a helpful story",
        split.dataset_id,
        cfg.questions_per_dataset
    );
    Ok(helpful)
}

fn state_digest(state: &IterationState) -> String {
    sha256_hex(to_json_pretty(state))
}

pub fn state_path(out_dir: &Path, iteration: usize) -> PathBuf {
    out_dir.join(format!("state-{iteration}.json"))
}

/// The untuned model's state, with score means over the split samples.
pub fn baseline_state(
    ctx: &LoopContext<'_>,
    cfg: &FilterConfig,
    split: &Split,
) -> Result<IterationState, SelfSftError> {
    let generator = ctx.generator;
    let (train, eval) = trajectory_means(ctx, cfg, generator, split)?;
    Ok(IterationState {
        iteration: 0,
        model_ref: generator.model_name().to_string(),
        train_example_count: 0,
        mean_total_score_train: train,
        mean_total_score_eval: eval,
        manifest_ref: json_digest(split),
        strategy: String::new(),
        k_percent: cfg.k_percent,
        helpful_pool_size: 0,
        epoch_losses: Vec::new(),
    })
}

fn trajectory_means(
    ctx: &LoopContext<'_>,
    cfg: &FilterConfig,
    generator: &Endpoint,
    split: &Split,
) -> Result<(f64, f64), SelfSftError> {
    let train: Vec<String> = split.datasets.iter().flat_map(|d| d.train.iter().cloned()).collect();
    let eval: Vec<String> = split.datasets.iter().flat_map(|d| d.eval.iter().cloned()).collect();
    Ok((
        mean_total(ctx, generator, &train, cfg.n_stories)?,
        mean_total(ctx, generator, &eval, cfg.n_stories)?,
    ))
}

/// Generate, filter and train once, starting from `prev`. Writes the
/// iteration's artifacts and `state-<i>.json` under `out_dir`.
pub fn run_iteration(
    ctx: &LoopContext<'_>,
    cfg: &FilterConfig,
    split: &Split,
    prev: &IterationState,
    strategy: &dyn SelectionStrategy,
    trainer: &dyn Trainer,
    out_dir: &Path,
) -> Result<IterationState, SelfSftError> {
    cfg.validate()?;
    let iteration = prev.iteration + 1;
    let dir = out_dir.join(format!("iter-{iteration}"));
    let generator = ctx.generator.with_model(&prev.model_ref);

    let mut helpful = Vec::new();
    for d in &split.datasets {
        helpful.extend(search_dataset(ctx, cfg, &generator, d)?);
    }
    if helpful.is_empty() {
        return Err(SelfSftError::NoHelpful(iteration));
    }
    write_jsonl(&dir.join("helpful.jsonl"), &helpful)?;

    let scores: Vec<ScoredStory> = if strategy.uses_scores() {
        let results = map_ordered(&helpful, ctx.workers(), |e| -> Result<ScoredStory, SelfSftError> {
            Ok(score_story(e, ctx.question(&e.question_id)?, ctx.scorer, ctx.embedder)?)
        });
        let scores = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        write_jsonl(&dir.join("scores.jsonl"), &scores)?;
        scores
    } else {
        Vec::new()
    };

    let retained = strategy.select(&helpful, &scores, cfg.k_percent);
    let examples = build_sft_examples(ctx.prompter, &retained, &helpful, ctx.questions, iteration)?;
    let data = export_sft(&examples, &dir.join("sft.jsonl"))?;
    let result = trainer.train(&TrainJob::new(&data, &prev.model_ref, &dir.join("trainer")))?;

    let tuned = ctx.generator.with_model(&result.model_ref);
    let (train, eval) = trajectory_means(ctx, cfg, &tuned, split)?;
    let state = IterationState {
        iteration,
        model_ref: result.model_ref,
        train_example_count: examples.len(),
        mean_total_score_train: train,
        mean_total_score_eval: eval,
        manifest_ref: state_digest(prev),
        strategy: strategy.name().to_string(),
        k_percent: cfg.k_percent,
        helpful_pool_size: helpful.len(),
        epoch_losses: result.epoch_losses,
    };
    write_json(&state_path(out_dir, iteration), &state)?;
    Ok(state)
}

/// Baseline plus `iterations` rounds. Returns every state, baseline first.
pub fn run_loop(
    ctx: &LoopContext<'_>,
    cfg: &FilterConfig,
    strategy: &dyn SelectionStrategy,
    trainer: &dyn Trainer,
    iterations: usize,
    out_dir: &Path,
) -> Result<Vec<IterationState>, SelfSftError> {
    if iterations == 0 {
        return Err(SelfSftError::InvalidConfig("iterations must be at least 1".into()));
    }
    let split = make_split(ctx.questions, cfg)?;
    write_json(&out_dir.join("split.json"), &split)?;
    let mut states = vec![baseline_state(ctx, cfg, &split)?];
    write_json(&out_dir.join("baseline.json"), &states[0])?;
    for _ in 0..iterations {
        let next = run_iteration(
            ctx,
            cfg,
            &split,
            states.last().expect("baseline"),
            strategy,
            trainer,
            out_dir,
        )?;
        states.push(next);
    }
    Ok(states)
}

/// Single round keeping every helpful story, without scoring.
pub fn run_naive_sft(
    ctx: &LoopContext<'_>,
    cfg: &FilterConfig,
    trainer: &dyn Trainer,
    out_dir: &Path,
) -> Result<Vec<IterationState>, SelfSftError> {
    run_loop(ctx, cfg, &AllHelpful, trainer, 1, out_dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub iteration: usize,
    pub mean_total_train: f64,
    pub mean_total_eval: f64,
}

pub fn score_trajectory(states: &[IterationState]) -> Result<Vec<TrajectoryPoint>, SelfSftError> {
    if states.is_empty() {
        return Err(SelfSftError::NoStates);
    }
    let mut points: Vec<TrajectoryPoint> = states
        .iter()
        .map(|s| TrajectoryPoint {
            iteration: s.iteration,
            mean_total_train: s.mean_total_score_train,
            mean_total_eval: s.mean_total_score_eval,
        })
        .collect();
    points.sort_by_key(|p| p.iteration);
    Ok(points)
}

pub fn write_trajectory_csv<W: Write>(points: &[TrajectoryPoint], out: W) -> Result<(), SelfSftError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "mean_total_train", "mean_total_eval"])?;
    for p in points {
        w.write_record([
            p.iteration.to_string(),
            format!("{:.6}", p.mean_total_train),
            format!("{:.6}", p.mean_total_eval),
        ])?;
    }
    w.flush()?;
    Ok(())
}
