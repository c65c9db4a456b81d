//! Source-format adapters. Each adapter turns one input line into a
//! [`QuestionRecord`]; the registry selects an adapter by its format id.

use std::collections::BTreeMap;

use serde::Deserialize;

use super::record::{label_for_index, AnswerOption, QuestionRecord};

/// Parses one nonblank line of a dataset file.
pub trait FormatAdapter: Send + Sync {
    fn format_id(&self) -> &'static str;

    /// `dataset_id` is the caller-supplied id; unified records carry their own.
    fn parse_line(&self, line: &str, dataset_id: &str, line_no: usize) -> Result<QuestionRecord, String>;
}

pub struct FormatRegistry {
    adapters: BTreeMap<&'static str, Box<dyn FormatAdapter>>,
}

impl FormatRegistry {
    pub fn empty() -> Self {
        Self {
            adapters: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, adapter: Box<dyn FormatAdapter>) {
        self.adapters.insert(adapter.format_id(), adapter);
    }

    pub fn get(&self, format_id: &str) -> Option<&dyn FormatAdapter> {
        self.adapters.get(format_id).map(|a| a.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.adapters.keys().copied().collect()
    }
}

impl Default for FormatRegistry {
    fn default() -> Self {
        let mut reg = Self::empty();
        reg.register(Box::new(UnifiedJsonl));
        reg.register(Box::new(CsqaSource));
        reg.register(Box::new(ArcSource));
        reg.register(Box::new(CopaSource));
        reg
    }
}

pub struct UnifiedJsonl;

impl FormatAdapter for UnifiedJsonl {
    fn format_id(&self) -> &'static str {
        "unified-jsonl"
    }

    fn parse_line(&self, line: &str, _dataset_id: &str, _line_no: usize) -> Result<QuestionRecord, String> {
        serde_json::from_str(line).map_err(|e| e.to_string())
    }
}

#[derive(Deserialize)]
struct SourceChoice {
    label: String,
    text: String,
}

#[derive(Deserialize)]
struct SourceQuestion {
    stem: String,
    choices: Vec<SourceChoice>,
}

#[derive(Deserialize)]
struct CsqaLine {
    id: String,
    question: SourceQuestion,
    #[serde(rename = "answerKey")]
    answer_key: String,
}

/// Relabels choices `A, B, ...` in their source order and maps the answer
/// key through the same relabelling.
fn relabel(choices: Vec<SourceChoice>, answer_key: &str) -> Result<(Vec<AnswerOption>, String), String> {
    let mut gold = None;
    let mut options = Vec::with_capacity(choices.len());
    for (i, c) in choices.into_iter().enumerate() {
        let label = label_for_index(i);
        if c.label.trim() == answer_key.trim() {
            gold = Some(label.clone());
        }
        options.push(AnswerOption::new(label, c.text.trim()));
    }
    let gold = gold.ok_or_else(|| format!("answerKey {answer_key:?} matches no choice label"))?;
    Ok((options, gold))
}

/// CommonsenseQA release format:
/// `{"answerKey","id","question":{"question_concept","choices":[{"label","text"}],"stem"}}`.
pub struct CsqaSource;

impl FormatAdapter for CsqaSource {
    fn format_id(&self) -> &'static str {
        "csqa-source"
    }

    fn parse_line(&self, line: &str, dataset_id: &str, _line_no: usize) -> Result<QuestionRecord, String> {
        let src: CsqaLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let (options, gold) = relabel(src.question.choices, &src.answer_key)?;
        Ok(QuestionRecord {
            dataset_id: dataset_id.to_string(),
            question_id: src.id,
            question_text: src.question.stem.trim().to_string(),
            options,
            gold_label: Some(gold),
            gold_text: None,
            tags: vec![],
        })
    }
}

/// ARC release format. Same shape as CommonsenseQA, but some questions use
/// numeric labels `1..4`, which are relabelled by position.
pub struct ArcSource;

impl FormatAdapter for ArcSource {
    fn format_id(&self) -> &'static str {
        "arc-source"
    }

    fn parse_line(&self, line: &str, dataset_id: &str, line_no: usize) -> Result<QuestionRecord, String> {
        let mut rec = CsqaSource.parse_line(line, dataset_id, line_no)?;
        rec.tags.push("science".into());
        Ok(rec)
    }
}

#[derive(Deserialize)]
struct CopaLine {
    premise: String,
    choice1: String,
    choice2: String,
    question: String,
    label: u8,
    idx: serde_json::Value,
}

/// COPA in the SuperGLUE JSONL layout. The question text is the premise
/// followed by "What was the cause of this?" or "What was the effect of this?".
pub struct CopaSource;

impl FormatAdapter for CopaSource {
    fn format_id(&self) -> &'static str {
        "copa-source"
    }

    fn parse_line(&self, line: &str, dataset_id: &str, _line_no: usize) -> Result<QuestionRecord, String> {
        let src: CopaLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let ask = match src.question.as_str() {
            "cause" => "What was the cause of this?",
            "effect" => "What was the effect of this?",
            other => return Err(format!("unknown COPA question type {other:?}")),
        };
        let gold = match src.label {
            0 => "A",
            1 => "B",
            other => return Err(format!("COPA label {other} is not 0 or 1")),
        };
        let idx = match &src.idx {
            serde_json::Value::String(s) => s.clone(),
            v => v.to_string(),
        };
        Ok(QuestionRecord {
            dataset_id: dataset_id.to_string(),
            question_id: format!("{dataset_id}-{idx}"),
            question_text: format!("{} {}", src.premise.trim(), ask),
            options: vec![
                AnswerOption::new("A", src.choice1.trim()),
                AnswerOption::new("B", src.choice2.trim()),
            ],
            gold_label: Some(gold.into()),
            gold_text: None,
            tags: vec!["daily-event".into()],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_knows_the_four_formats() {
        let reg = FormatRegistry::default();
        assert_eq!(
            reg.names(),
            vec!["arc-source", "copa-source", "csqa-source", "unified-jsonl"]
        );
        assert!(reg.get("squad").is_none());
    }

    #[test]
    fn arc_numeric_labels_are_relabelled() {
        let line = r#"{"id":"Mercury_1","question":{"stem":"Which is a mammal?","choices":[{"text":"shark","label":"1"},{"text":"whale","label":"2"},{"text":"trout","label":"3"}]},"answerKey":"2"}"#;
        let rec = ArcSource.parse_line(line, "arc-easy", 1).unwrap();
        assert_eq!(rec.labels(), vec!["A", "B", "C"]);
        assert_eq!(rec.gold_label.as_deref(), Some("B"));
        rec.validate().unwrap();
    }

    #[test]
    fn copa_builds_effect_question() {
        let line = r#"{"premise":"The woman was in a bad mood.","choice1":"She engaged in small talk with her friend.","choice2":"She told her friend to leave her alone.","question":"effect","label":1,"idx":7}"#;
        let rec = CopaSource.parse_line(line, "copa", 1).unwrap();
        assert_eq!(
            rec.question_text,
            "The woman was in a bad mood. What was the effect of this?"
        );
        assert_eq!(rec.gold_label.as_deref(), Some("B"));
        assert_eq!(rec.question_id, "copa-7");
    }

    #[test]
    fn bad_answer_key_is_reported() {
        let line = r#"{"id":"x","question":{"stem":"q?","choices":[{"label":"A","text":"a"}]},"answerKey":"Z"}"#;
        assert!(CsqaSource
            .parse_line(line, "csqa", 1)
            .unwrap_err()
            .contains("answerKey"));
    }
}
