//! Story and rule generation per question, and yes/no commonsense judging.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::QuestionRecord;
use crate::digest::{json_digest, sha256_hex};
use crate::gateway::{map_ordered, Endpoint, GatewayError, GenerationParams};
use crate::prompting::{ExpressionKind, PromptError, Prompter};
use crate::rng::{seed_for_label, SplitMix64};

pub const DEFAULT_EXPRESSIONS: usize = 5;
pub const GENERATION_MAX_TOKENS: usize = 256;
pub const JUDGE_MAX_TOKENS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expression {
    pub expression_id: String,
    pub question_id: String,
    pub kind: ExpressionKind,
    pub text: String,
    pub model_name: String,
    pub sample_index: usize,
    pub params_digest: String,
}

/// A completion that was dropped instead of becoming an [`Expression`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub question_id: String,
    pub kind: ExpressionKind,
    pub sample_index: usize,
    pub model_name: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generated {
    pub expressions: Vec<Expression>,
    pub exclusions: Vec<Exclusion>,
}

impl Generated {
    fn extend(&mut self, other: Generated) {
        self.expressions.extend(other.expressions);
        self.exclusions.extend(other.exclusions);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Yes,
    No,
    /// Stored for responses matching neither rule; never counted.
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub expression_id: String,
    pub verdict: Verdict,
    pub judge_model: String,
    pub raw_response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonsenseAccuracy {
    pub accuracy: f64,
    pub yes: usize,
    pub counted: usize,
    pub unparseable: usize,
}

#[derive(Debug, Error)]
pub enum ElicitError {
    #[error("n must be at least 1")]
    ZeroSamples,
    #[error("no judgments given")]
    NoJudgments,
    #[error("all {0} judgments are unparseable")]
    AllUnparseable(usize),
    #[error("unparseable verdict: {raw_response:?}")]
    UnparseableVerdict { raw_response: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

pub fn expression_id(question_id: &str, kind: ExpressionKind, index: usize, model_name: &str) -> String {
    format!(
        "{question_id}:{}:{index}:{}",
        kind.as_str(),
        &sha256_hex(model_name)[..8]
    )
}

/// Generation sampling parameters at the endpoint's default temperature.
pub fn generation_params(endpoint: &Endpoint, n: usize) -> GenerationParams {
    GenerationParams {
        temperature: endpoint.spec().generation_temperature(),
        n_samples: n,
        max_tokens: GENERATION_MAX_TOKENS,
        seed: None,
    }
}

/// Generates `n` stories or rules for one question. Empty completions are
/// logged and returned as exclusions.
pub fn generate_expressions(
    prompter: &Prompter,
    q: &QuestionRecord,
    kind: ExpressionKind,
    endpoint: &Endpoint,
    n: usize,
) -> Result<Generated, ElicitError> {
    if n == 0 {
        return Err(ElicitError::ZeroSamples);
    }
    let params = generation_params(endpoint, n);
    let prompt = prompter.generation(q, kind);
    let completions = endpoint.chat_generate(&prompt, &params)?;
    let params_digest = json_digest(&params);
    let model = endpoint.model_name().to_string();
    let mut out = Generated::default();
    for (i, text) in completions.into_iter().enumerate() {
        if text.trim().is_empty() {
            log::warn!(
                "{}: empty {} completion at index {i} excluded",
                q.question_id,
                kind.as_str()
            );
            out.exclusions.push(Exclusion {
                question_id: q.question_id.clone(),
                kind,
                sample_index: i,
                model_name: model.clone(),
                reason: "empty completion".into(),
            });
            continue;
        }
        out.expressions.push(Expression {
            expression_id: expression_id(&q.question_id, kind, i, &model),
            question_id: q.question_id.clone(),
            kind,
            text,
            model_name: model.clone(),
            sample_index: i,
            params_digest: params_digest.clone(),
        });
    }
    Ok(out)
}

/// [`generate_expressions`] over many questions through the endpoint's
/// worker pool. Output keeps question order.
pub fn generate_batch(
    prompter: &Prompter,
    questions: &[QuestionRecord],
    kind: ExpressionKind,
    endpoint: &Endpoint,
    n: usize,
) -> Result<Generated, ElicitError> {
    let results = map_ordered(questions, endpoint.max_in_flight(), |q| {
        generate_expressions(prompter, q, kind, endpoint, n)
    });
    let mut all = Generated::default();
    for r in results {
        all.extend(r?);
    }
    Ok(all)
}

/// Lowercases, strips leading punctuation and whitespace, then matches a
/// leading `yes` or `no` word.
pub fn parse_verdict(raw: &str) -> Option<Verdict> {
    let norm = raw.trim_start_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    let starts_word = |w: &str| {
        norm.strip_prefix(w)
            .is_some_and(|rest| !rest.starts_with(|c: char| c.is_alphanumeric()))
    };
    if starts_word("yes") {
        Some(Verdict::Yes)
    } else if starts_word("no") {
        Some(Verdict::No)
    } else {
        None
    }
}

/// Asks the judge whether an expression is commonsensical (temperature 0).
pub fn judge_commonsense(prompter: &Prompter, expr: &Expression, judge: &Endpoint) -> Result<Judgment, ElicitError> {
    let j = judge_record(prompter, expr, judge)?;
    if j.verdict == Verdict::Unparseable {
        return Err(ElicitError::UnparseableVerdict {
            raw_response: j.raw_response,
        });
    }
    Ok(j)
}

/// Like [`judge_commonsense`] but keeps unparseable responses as records.
pub fn judge_record(prompter: &Prompter, expr: &Expression, judge: &Endpoint) -> Result<Judgment, ElicitError> {
    let prompt = prompter.judge(&expr.text)?;
    let raw = judge
        .chat_generate(&prompt, &GenerationParams::greedy(JUDGE_MAX_TOKENS))?
        .into_iter()
        .next()
        .unwrap_or_default();
    Ok(Judgment {
        expression_id: expr.expression_id.clone(),
        verdict: parse_verdict(&raw).unwrap_or(Verdict::Unparseable),
        judge_model: judge.model_name().to_string(),
        raw_response: raw,
    })
}

/// Share of `yes` among parseable judgments.
pub fn commonsense_accuracy(judgments: &[Judgment]) -> Result<CommonsenseAccuracy, ElicitError> {
    if judgments.is_empty() {
        return Err(ElicitError::NoJudgments);
    }
    let yes = judgments.iter().filter(|j| j.verdict == Verdict::Yes).count();
    let unparseable = judgments.iter().filter(|j| j.verdict == Verdict::Unparseable).count();
    let counted = judgments.len() - unparseable;
    if counted == 0 {
        return Err(ElicitError::AllUnparseable(unparseable));
    }
    Ok(CommonsenseAccuracy {
        accuracy: yes as f64 / counted as f64,
        yes,
        counted,
        unparseable,
    })
}

/// Picks one expression per (question, kind) with a seeded choice, in
/// first-appearance order.
pub fn select_one_per_question(expressions: &[Expression], seed: u64) -> Vec<Expression> {
    let mut groups: Vec<((String, ExpressionKind), Vec<&Expression>)> = Vec::new();
    for e in expressions {
        let key = (e.question_id.clone(), e.kind);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(e),
            None => groups.push((key, vec![e])),
        }
    }
    groups
        .into_iter()
        .map(|((qid, kind), g)| {
            let label = format!("{qid}:{}", kind.as_str());
            let i = SplitMix64::new(seed_for_label(seed, &label)).below(g.len() as u64) as usize;
            g[i].clone()
        })
        .collect()
}
