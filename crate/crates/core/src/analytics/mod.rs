//! Statistics over persisted run artifacts and report emission.

pub mod report;
mod stats;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::QuestionRecord;
use crate::qa::AnswerRecord;
use crate::scoring::ScoredStory;

pub use stats::{
    ci95_half_width, mean, paired_difference_test, pearson, sample_sd, Correlation, PairedT, PairedTest, TestRegistry,
    TestResult, Wilcoxon,
};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("paired samples have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 3 pairs, got {0}")]
    TooFew(usize),
    #[error("non-finite value in sample")]
    NonFinite,
    #[error("zero variance")]
    ZeroVariance,
    #[error("unknown paired test {0:?}")]
    UnknownTest(String),
    #[error("no scores for annotated expression {0}")]
    MissingScore(String),
    #[error("no annotations")]
    NoAnnotations,
    #[error("question {0} is not a yes/no question")]
    NotYesNo(String),
    #[error("unknown question {0}")]
    UnknownQuestion(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    SemanticDrifting,
    UncommonOrIncorrect,
    IncorrectAnswering,
    InconsiderationOfOptions,
    InclusionOfWrongOptions,
}

impl ErrorType {
    pub const ALL: [ErrorType; 5] = [
        Self::SemanticDrifting,
        Self::UncommonOrIncorrect,
        Self::IncorrectAnswering,
        Self::InconsiderationOfOptions,
        Self::InclusionOfWrongOptions,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SemanticDrifting => "semantic_drifting",
            Self::UncommonOrIncorrect => "uncommon_or_incorrect",
            Self::IncorrectAnswering => "incorrect_answering",
            Self::InconsiderationOfOptions => "inconsideration_of_options",
            Self::InclusionOfWrongOptions => "inclusion_of_wrong_options",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorAnnotation {
    pub expression_id: String,
    pub error_type: ErrorType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTypeRow {
    pub error_type: ErrorType,
    pub count: usize,
    pub share: f64,
    pub mean_commonsense: f64,
    pub mean_similarity: f64,
    pub ci95_commonsense: f64,
    pub ci95_similarity: f64,
}

/// Per-type counts, shares and score means with 95% half-widths, in
/// taxonomy order. Types without annotations are omitted.
pub fn error_type_summary(
    annotations: &[ErrorAnnotation],
    scores: &BTreeMap<String, ScoredStory>,
) -> Result<Vec<ErrorTypeRow>, AnalyticsError> {
    if annotations.is_empty() {
        return Err(AnalyticsError::NoAnnotations);
    }
    let mut by_type: BTreeMap<ErrorType, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for a in annotations {
        let s = scores
            .get(&a.expression_id)
            .ok_or_else(|| AnalyticsError::MissingScore(a.expression_id.clone()))?;
        let e = by_type.entry(a.error_type).or_default();
        e.0.push(s.commonsense);
        e.1.push(s.similarity);
    }
    let total = annotations.len() as f64;
    Ok(by_type
        .into_iter()
        .map(|(t, (cs, sim))| ErrorTypeRow {
            error_type: t,
            count: cs.len(),
            share: cs.len() as f64 / total,
            mean_commonsense: mean(&cs),
            mean_similarity: mean(&sim),
            ci95_commonsense: ci95_half_width(&cs),
            ci95_similarity: ci95_half_width(&sim),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegationSummary {
    pub errors: usize,
    pub gold_no_pred_yes: usize,
    pub gold_yes_pred_no: usize,
    pub frac_gold_no_pred_yes: f64,
    pub frac_gold_yes_pred_no: f64,
    pub extraction_failures: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Among wrong answers to yes/no questions, the share that said yes to a
/// gold no and the share that said no to a gold yes.
pub fn negation_asymmetry(
    records: &[AnswerRecord],
    questions: &BTreeMap<String, QuestionRecord>,
) -> Result<NegationSummary, AnalyticsError> {
    let (mut errors, mut no_yes, mut yes_no, mut failures) = (0, 0, 0, 0);
    for r in records {
        let q = questions
            .get(&r.question_id)
            .ok_or_else(|| AnalyticsError::UnknownQuestion(r.question_id.clone()))?;
        let (Some(yes), Some(no)) = (q.yes_label(), q.no_label()) else {
            return Err(AnalyticsError::NotYesNo(q.question_id.clone()));
        };
        if !q.is_yes_no() {
            return Err(AnalyticsError::NotYesNo(q.question_id.clone()));
        }
        match (r.correct, r.extracted_label.as_deref()) {
            (None, _) => failures += 1,
            (Some(false), Some(pred)) => {
                errors += 1;
                let gold = q.gold_label.as_deref();
                if gold == Some(no) && pred == yes {
                    no_yes += 1;
                } else if gold == Some(yes) && pred == no {
                    yes_no += 1;
                }
            }
            _ => {}
        }
    }
    let frac = |k: usize| if errors == 0 { 0.0 } else { k as f64 / errors as f64 };
    Ok(NegationSummary {
        errors,
        gold_no_pred_yes: no_yes,
        gold_yes_pred_no: yes_no,
        frac_gold_no_pred_yes: frac(no_yes),
        frac_gold_yes_pred_no: frac(yes_no),
        extraction_failures: failures,
        note: (errors == 0).then(|| "no errors".to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AnswerOption;
    use crate::prompting::Condition;

    fn yes_no_q(id: &str, gold: &str) -> QuestionRecord {
        QuestionRecord {
            dataset_id: "com2sense".into(),
            question_id: id.into(),
            question_text: "Is this sensible?".into(),
            options: vec![AnswerOption::new("A", "yes"), AnswerOption::new("B", "no")],
            gold_label: Some(gold.into()),
            gold_text: None,
            tags: vec!["negation".into()],
        }
    }

    fn answer(id: &str, pred: Option<&str>, correct: Option<bool>) -> AnswerRecord {
        AnswerRecord {
            dataset_id: "com2sense".into(),
            question_id: id.into(),
            condition: Condition::Base,
            raw_response: String::new(),
            extracted_label: pred.map(String::from),
            correct,
            context_digest: String::new(),
        }
    }

    #[test]
    fn nine_to_one() {
        let mut qs = BTreeMap::new();
        let mut recs = Vec::new();
        for i in 0..9 {
            let id = format!("n{i}");
            qs.insert(id.clone(), yes_no_q(&id, "B"));
            recs.push(answer(&id, Some("A"), Some(false)));
        }
        qs.insert("y".into(), yes_no_q("y", "A"));
        recs.push(answer("y", Some("B"), Some(false)));
        qs.insert("ok".into(), yes_no_q("ok", "A"));
        recs.push(answer("ok", Some("A"), Some(true)));
        qs.insert("fail".into(), yes_no_q("fail", "A"));
        recs.push(answer("fail", None, None));
        let s = negation_asymmetry(&recs, &qs).unwrap();
        assert_eq!((s.frac_gold_no_pred_yes, s.frac_gold_yes_pred_no), (0.9, 0.1));
        assert_eq!(s.extraction_failures, 1);
    }

    #[test]
    fn zero_errors_and_non_yes_no() {
        let mut qs = BTreeMap::new();
        qs.insert("q".into(), yes_no_q("q", "A"));
        let s = negation_asymmetry(&[answer("q", Some("A"), Some(true))], &qs).unwrap();
        assert_eq!((s.frac_gold_no_pred_yes, s.frac_gold_yes_pred_no), (0.0, 0.0));
        assert!(s.note.is_some());
        qs.insert("glue".into(), crate::corpus::fixtures::glue_stick());
        assert!(matches!(
            negation_asymmetry(&[answer("glue", Some("A"), Some(false))], &qs),
            Err(AnalyticsError::NotYesNo(_))
        ));
    }

    #[test]
    fn error_shares_and_intervals() {
        let mut scores = BTreeMap::new();
        for i in 0..4 {
            let id = format!("e{i}");
            scores.insert(id.clone(), ScoredStory::new(&id, "q", 0.5, 0.25));
        }
        let ann = |i: usize, t| ErrorAnnotation {
            expression_id: format!("e{i}"),
            error_type: t,
        };
        let rows = error_type_summary(
            &[
                ann(0, ErrorType::SemanticDrifting),
                ann(1, ErrorType::SemanticDrifting),
                ann(2, ErrorType::SemanticDrifting),
                ann(3, ErrorType::IncorrectAnswering),
            ],
            &scores,
        )
        .unwrap();
        assert_eq!((rows[0].share, rows[1].share), (0.75, 0.25));
        assert_eq!(rows[0].ci95_commonsense, 0.0);
        assert!(matches!(
            error_type_summary(&[ann(9, ErrorType::SemanticDrifting)], &scores),
            Err(AnalyticsError::MissingScore(_))
        ));
    }

    #[test]
    fn error_type_names_round_trip() {
        for t in ErrorType::ALL {
            let json = serde_json::to_string(&t).unwrap();
            assert_eq!(json, format!("\"{}\"", t.as_str()));
        }
        assert!(serde_json::from_str::<ErrorType>("\"other\"").is_err());
    }
}
