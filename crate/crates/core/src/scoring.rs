//! Story quality: commonsense plausibility plus similarity to the question.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::QuestionRecord;
use crate::elicit::Expression;
use crate::gateway::{Endpoint, GatewayError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredStory {
    pub expression_id: String,
    pub question_id: String,
    pub commonsense: f64,
    pub similarity: f64,
    pub total: f64,
}

impl ScoredStory {
    pub fn new(expression_id: &str, question_id: &str, commonsense: f64, similarity: f64) -> Self {
        Self {
            expression_id: expression_id.to_string(),
            question_id: question_id.to_string(),
            commonsense,
            similarity,
            total: commonsense + similarity,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("vectors have dimensions {0} and {1}")]
    DimensionMismatch(usize, usize),
    #[error("empty vector")]
    Empty,
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("expression {expression_id} belongs to {expected}, not {got}")]
    QuestionMismatch {
        expression_id: String,
        expected: String,
        got: String,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Cosine similarity, clamped to [-1, 1] against rounding.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, ScoringError> {
    if u.len() != v.len() {
        return Err(ScoringError::DimensionMismatch(u.len(), v.len()));
    }
    if u.is_empty() {
        return Err(ScoringError::Empty);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(ScoringError::ZeroNorm);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cosine mapped to [0, 1]; negative values become 0.
pub fn similarity(u: &[f64], v: &[f64]) -> Result<f64, ScoringError> {
    Ok(cosine(u, v)?.max(0.0))
}

/// Scores a story against its question text (options excluded).
pub fn score_story(
    expr: &Expression,
    q: &QuestionRecord,
    scorer: &Endpoint,
    embedder: &Endpoint,
) -> Result<ScoredStory, ScoringError> {
    if expr.question_id != q.question_id {
        return Err(ScoringError::QuestionMismatch {
            expression_id: expr.expression_id.clone(),
            expected: expr.question_id.clone(),
            got: q.question_id.clone(),
        });
    }
    let commonsense = scorer.commonsense_score(&expr.text)?;
    let sim = similarity(&embedder.embed(&expr.text)?, &embedder.embed(&q.question_text)?)?;
    Ok(ScoredStory::new(&expr.expression_id, &q.question_id, commonsense, sim))
}
