//! Four-condition question answering: no context, stories, rules, or both.

mod extract;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::QuestionRecord;
use crate::gateway::{Endpoint, GatewayError, GenerationParams};
use crate::prompting::{AnswerContext, Condition, PromptError, Prompter};

pub use extract::{extract_fill_in, extract_label, normalize_fill_in};

pub const ANSWER_MAX_TOKENS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub dataset_id: String,
    pub question_id: String,
    pub condition: Condition,
    pub raw_response: String,
    /// Option label, or the normalized answer word for fill-in questions.
    pub extracted_label: Option<String>,
    /// `None` exactly when extraction failed.
    pub correct: Option<bool>,
    pub context_digest: String,
}

#[derive(Debug, Error)]
pub enum QaError {
    #[error("no answer records")]
    NoRecords,
    #[error("dataset {dataset_id} has no {condition} accuracy")]
    MissingCondition { dataset_id: String, condition: Condition },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Extracts the answer from a response and checks it against the gold.
pub fn grade(q: &QuestionRecord, raw: &str) -> (Option<String>, Option<bool>) {
    if q.is_fill_in() {
        let got = extract_fill_in(raw);
        let gold = q.gold_text.as_deref().map(normalize_fill_in);
        let correct = got.as_ref().map(|g| Some(g) == gold.as_ref());
        (got, correct)
    } else {
        let got = extract_label(raw, &q.options);
        let correct = got.as_ref().map(|g| Some(g) == q.gold_label.as_ref());
        (got, correct)
    }
}

/// Answers one question under the condition implied by `ctx`.
pub fn answer(
    prompter: &Prompter,
    q: &QuestionRecord,
    ctx: AnswerContext<'_>,
    endpoint: &Endpoint,
    temperature: f64,
) -> Result<AnswerRecord, QaError> {
    let prompt = prompter.answer(q, ctx)?;
    let params = GenerationParams {
        temperature,
        ..GenerationParams::greedy(ANSWER_MAX_TOKENS)
    };
    let raw = endpoint
        .chat_generate(&prompt, &params)?
        .into_iter()
        .next()
        .unwrap_or_default();
    let (extracted_label, correct) = grade(q, &raw);
    Ok(AnswerRecord {
        dataset_id: q.dataset_id.clone(),
        question_id: q.question_id.clone(),
        condition: ctx.condition(),
        raw_response: raw,
        extracted_label,
        correct,
        context_digest: ctx.digest(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub dataset_id: String,
    pub condition: Condition,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub extraction_failures: usize,
}

/// Accuracy per (dataset, condition); failed extractions count as wrong.
/// Rows are ordered by dataset id, then base, story, rule, both.
pub fn accuracy(records: &[AnswerRecord]) -> Result<Vec<AccuracyRow>, QaError> {
    if records.is_empty() {
        return Err(QaError::NoRecords);
    }
    let mut cells: BTreeMap<(&str, Condition), (usize, usize, usize)> = BTreeMap::new();
    for r in records {
        let c = cells.entry((r.dataset_id.as_str(), r.condition)).or_default();
        c.0 += 1;
        if r.correct == Some(true) {
            c.1 += 1;
        }
        if r.correct.is_none() {
            c.2 += 1;
        }
    }
    Ok(cells
        .into_iter()
        .map(|((d, cond), (n, correct, failures))| AccuracyRow {
            dataset_id: d.to_string(),
            condition: cond,
            n,
            correct,
            accuracy: correct as f64 / n as f64,
            extraction_failures: failures,
        })
        .collect())
}

pub fn write_accuracy_csv<W: Write>(rows: &[AccuracyRow], out: W) -> Result<(), QaError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "dataset_id",
        "condition",
        "n",
        "correct",
        "accuracy",
        "extraction_failures",
    ])?;
    for r in rows {
        w.write_record([
            r.dataset_id.clone(),
            r.condition.to_string(),
            r.n.to_string(),
            r.correct.to_string(),
            format!("{:.6}", r.accuracy),
            r.extraction_failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub dataset_id: String,
    pub a: Condition,
    pub b: Condition,
    pub accuracy_a: f64,
    pub accuracy_b: f64,
    pub delta: f64,
}

/// `acc[a] - acc[b]` per dataset, largest first (ties by dataset id).
pub fn condition_delta(rows: &[AccuracyRow], a: Condition, b: Condition) -> Result<Vec<DeltaRow>, QaError> {
    let mut by_dataset: BTreeMap<&str, BTreeMap<Condition, f64>> = BTreeMap::new();
    for r in rows {
        by_dataset
            .entry(&r.dataset_id)
            .or_default()
            .insert(r.condition, r.accuracy);
    }
    let mut out = Vec::with_capacity(by_dataset.len());
    for (d, accs) in by_dataset {
        let get = |c: Condition| {
            accs.get(&c).copied().ok_or_else(|| QaError::MissingCondition {
                dataset_id: d.to_string(),
                condition: c,
            })
        };
        let (x, y) = (get(a)?, get(b)?);
        out.push(DeltaRow {
            dataset_id: d.to_string(),
            a,
            b,
            accuracy_a: x,
            accuracy_b: y,
            delta: x - y,
        });
    }
    out.sort_by(|p, q| {
        q.delta
            .total_cmp(&p.delta)
            .then_with(|| p.dataset_id.cmp(&q.dataset_id))
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::glue_stick;
    use crate::gateway::{ChatRule, MockBackend, MockScript, ModelEndpoint};
    use std::sync::Arc;

    fn endpoint(reply: &str) -> Endpoint {
        let script = MockScript {
            chat: vec![ChatRule::new(&[], &[reply])],
            ..Default::default()
        };
        Endpoint::new(
            ModelEndpoint::mock("qa", "toy"),
            Arc::new(MockBackend::new(script)),
            None,
        )
    }

    fn rec(dataset: &str, cond: Condition, correct: Option<bool>) -> AnswerRecord {
        AnswerRecord {
            dataset_id: dataset.into(),
            question_id: "q".into(),
            condition: cond,
            raw_response: String::new(),
            extracted_label: correct.map(|_| "A".into()),
            correct,
            context_digest: String::new(),
        }
    }

    #[test]
    fn base_correct() {
        let r = answer(
            &Prompter::default(),
            &glue_stick(),
            AnswerContext::None,
            &endpoint("D"),
            0.0,
        )
        .unwrap();
        assert_eq!((r.extracted_label.as_deref(), r.correct), (Some("D"), Some(true)));
        assert_eq!(r.condition, Condition::Base);
        assert!(r.context_digest.is_empty());
    }

    #[test]
    fn story_wrong_label() {
        let stories: Vec<String> = (0..5).map(|i| format!("story {i}")).collect();
        let r = answer(
            &Prompter::default(),
            &glue_stick(),
            AnswerContext::Stories(&stories),
            &endpoint("E. kitchen drawer"),
            0.0,
        )
        .unwrap();
        assert_eq!((r.extracted_label.as_deref(), r.correct), (Some("E"), Some(false)));
        assert!(!r.context_digest.is_empty());
    }

    #[test]
    fn failed_extraction() {
        let r = answer(
            &Prompter::default(),
            &glue_stick(),
            AnswerContext::None,
            &endpoint("I cannot determine"),
            0.0,
        )
        .unwrap();
        assert_eq!((r.extracted_label, r.correct), (None, None));
    }

    #[test]
    fn accuracy_arithmetic() {
        use Condition::*;
        let recs = vec![
            rec("d", Base, Some(true)),
            rec("d", Base, Some(true)),
            rec("d", Base, Some(false)),
            rec("d", Base, Some(true)),
            rec("d", Story, None),
        ];
        let rows = accuracy(&recs).unwrap();
        assert_eq!(rows[0].accuracy, 0.75);
        assert_eq!((rows[1].accuracy, rows[1].extraction_failures), (0.0, 1));
        assert!(matches!(accuracy(&[]), Err(QaError::NoRecords)));
    }

    #[test]
    fn deltas() {
        use Condition::*;
        let row = |d: &str, c, acc| AccuracyRow {
            dataset_id: d.into(),
            condition: c,
            n: 100,
            correct: 0,
            accuracy: acc,
            extraction_failures: 0,
        };
        let rows = vec![
            row("x", Story, 0.48),
            row("x", Rule, 0.42),
            row("y", Story, 0.5),
            row("y", Rule, 0.5),
        ];
        let d = condition_delta(&rows, Story, Rule).unwrap();
        assert_eq!(d[0].dataset_id, "x");
        assert!((d[0].delta - 0.06).abs() < 1e-12);
        assert_eq!(d[1].delta, 0.0);
        assert!(matches!(
            condition_delta(&rows, Story, Both),
            Err(QaError::MissingCondition { .. })
        ));
    }

    #[test]
    fn csv_columns() {
        let rows = accuracy(&[rec("d", Condition::Base, Some(true))]).unwrap();
        let mut buf = Vec::new();
        write_accuracy_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "dataset_id,condition,n,correct,accuracy,extraction_failures\nd,base,1,1,1.000000,0\n"
        );
    }
}
