use serde::{Deserialize, Serialize};

use super::CorpusError;

pub const MAX_OPTIONS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: String,
    pub text: String,
}

impl AnswerOption {
    pub fn new(label: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            text: text.into(),
        }
    }
}

/// One commonsense question in the unified on-disk shape.
///
/// Multiple-choice questions carry `options` labelled `A`, `B`, ... and a
/// `gold_label`; fill-in questions have no options and a `gold_text`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub dataset_id: String,
    pub question_id: String,
    pub question_text: String,
    #[serde(default)]
    pub options: Vec<AnswerOption>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_text: Option<String>,
    #[serde(default)]
    pub tags: Vec<String>,
}

pub fn label_for_index(index: usize) -> String {
    char::from(b'A' + index as u8).to_string()
}

impl QuestionRecord {
    /// Checks every record invariant; the error names the first violation.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |reason: String| {
            Err(CorpusError::InvalidRecord {
                question_id: self.question_id.clone(),
                reason,
            })
        };
        if self.dataset_id.trim().is_empty() {
            return bad("empty dataset_id".into());
        }
        if self.question_id.trim().is_empty() {
            return bad("empty question_id".into());
        }
        if self.question_text.trim().is_empty() {
            return bad("empty question_text".into());
        }
        if self.options.len() > MAX_OPTIONS {
            return bad(format!("{} options exceed the A–H range", self.options.len()));
        }
        for (i, opt) in self.options.iter().enumerate() {
            let expected = label_for_index(i);
            if opt.label != expected {
                return bad(format!(
                    "option {} has label {:?}, expected {:?} (labels must be A, B, ... in order)",
                    i + 1,
                    opt.label,
                    expected
                ));
            }
            if opt.text.trim().is_empty() {
                return bad(format!("option {} has empty text", opt.label));
            }
        }
        if self.options.is_empty() {
            match &self.gold_text {
                Some(t) if !t.trim().is_empty() => {}
                _ => return bad("fill-in question without gold_text".into()),
            }
            if self.gold_label.is_some() {
                return bad("gold_label given but the question has no options".into());
            }
        } else {
            match &self.gold_label {
                None => return bad("missing gold_label".into()),
                Some(g) if !self.options.iter().any(|o| &o.label == g) => {
                    return bad(format!("gold_label {g:?} is not an option label"))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn is_fill_in(&self) -> bool {
        self.options.is_empty()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.options.iter().map(|o| o.label.as_str()).collect()
    }

    pub fn option(&self, label: &str) -> Option<&AnswerOption> {
        self.options.iter().find(|o| o.label == label)
    }

    /// `"A. classroom, B. desk drawer."`; empty for fill-in questions.
    pub fn options_line(&self) -> String {
        if self.options.is_empty() {
            return String::new();
        }
        let joined = self
            .options
            .iter()
            .map(|o| format!("{}. {}", o.label, o.text))
            .collect::<Vec<_>>()
            .join(", ");
        format!("{joined}.")
    }

    /// The gold answer as scored text: `"D. office"` or the fill-in answer.
    pub fn gold_answer_text(&self) -> String {
        match (&self.gold_label, &self.gold_text) {
            (Some(label), _) => match self.option(label) {
                Some(o) => format!("{}. {}", o.label, o.text),
                None => label.clone(),
            },
            (None, Some(text)) => text.clone(),
            (None, None) => String::new(),
        }
    }

    /// Two-option question whose options read yes/no or true/false.
    pub fn is_yes_no(&self) -> bool {
        self.yes_label().is_some() && self.no_label().is_some() && self.options.len() == 2
    }

    pub fn yes_label(&self) -> Option<&str> {
        self.options
            .iter()
            .find(|o| matches!(normalize_word(&o.text).as_str(), "yes" | "true"))
            .map(|o| o.label.as_str())
    }

    pub fn no_label(&self) -> Option<&str> {
        self.options
            .iter()
            .find(|o| matches!(normalize_word(&o.text).as_str(), "no" | "false"))
            .map(|o| o.label.as_str())
    }
}

fn normalize_word(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| c.is_ascii_punctuation())
        .to_ascii_lowercase()
}

/// Summary of one ingested dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub source_path: String,
    pub format_id: String,
    pub question_count: usize,
    /// Expected accuracy of a uniform random guess (fill-in questions count 0).
    pub random_accuracy: f64,
}

impl DatasetManifest {
    pub fn from_records(dataset_id: &str, source_path: &str, format_id: &str, records: &[QuestionRecord]) -> Self {
        let random_accuracy = if records.is_empty() {
            0.0
        } else {
            records
                .iter()
                .map(|r| {
                    if r.options.is_empty() {
                        0.0
                    } else {
                        1.0 / r.options.len() as f64
                    }
                })
                .sum::<f64>()
                / records.len() as f64
        };
        Self {
            dataset_id: dataset_id.to_string(),
            source_path: source_path.to_string(),
            format_id: format_id.to_string(),
            question_count: records.len(),
            random_accuracy,
        }
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn glue_stick() -> QuestionRecord {
        QuestionRecord {
            dataset_id: "csqa".into(),
            question_id: "glue".into(),
            question_text: "Where do adults use glue sticks?".into(),
            options: ["classroom", "desk drawer", "at school", "office", "kitchen drawer"]
                .iter()
                .enumerate()
                .map(|(i, t)| AnswerOption::new(label_for_index(i), *t))
                .collect(),
            gold_label: Some("D".into()),
            gold_text: None,
            tags: vec![],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::glue_stick;
    use super::*;

    #[test]
    fn glue_stick_is_valid() {
        glue_stick().validate().unwrap();
        assert_eq!(glue_stick().gold_answer_text(), "D. office");
    }

    #[test]
    fn duplicate_or_unordered_labels_rejected() {
        let mut q = glue_stick();
        q.options[1].label = "A".into();
        assert!(q.validate().is_err());
        let mut q = glue_stick();
        q.options.swap(0, 1);
        assert!(q.validate().is_err());
    }

    #[test]
    fn gold_must_be_a_label() {
        let mut q = glue_stick();
        q.gold_label = Some("F".into());
        assert!(q.validate().is_err());
        q.gold_label = None;
        assert!(q.validate().is_err());
    }

    #[test]
    fn fill_in_needs_gold_text() {
        let mut q = glue_stick();
        q.options.clear();
        q.gold_label = None;
        assert!(q.validate().is_err());
        q.gold_text = Some("three".into());
        q.validate().unwrap();
        assert_eq!(q.options_line(), "");
    }

    #[test]
    fn whitespace_only_text_rejected() {
        let mut q = glue_stick();
        q.options[2].text = "  ".into();
        assert!(q.validate().is_err());
        let mut q = glue_stick();
        q.question_text = "\t".into();
        assert!(q.validate().is_err());
    }

    #[test]
    fn yes_no_detection() {
        let mut q = glue_stick();
        q.options = vec![AnswerOption::new("A", "yes"), AnswerOption::new("B", "no")];
        q.gold_label = Some("B".into());
        assert!(q.is_yes_no());
        assert_eq!(q.no_label(), Some("B"));
        assert!(!glue_stick().is_yes_no());
    }
}
