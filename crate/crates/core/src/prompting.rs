//! Prompt rendering. Every renderer is a pure function of its inputs.
//!
//! Layout conventions fixed here:
//! * the common prefix is `"{P} is answering this question: \nQuestion: {q}\nOptions: {opts}"`,
//!   options comma-joined in label order and closed with a period, the
//!   Options line dropped for fill-in questions;
//! * generation prompts append one blank line and the two instruction
//!   sentences on separate lines;
//! * answer prompts put each template row on its own line, contexts joined
//!   by one blank line;
//! * `{answer_options}` renders as the options line without the `Options:`
//!   label.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::QuestionRecord;
use crate::digest::{sha256_hex, texts_digest};

pub const DEFAULT_PERSONA: &str = "Jane";

/// Separator between context texts inside answer prompts.
pub const CONTEXT_SEPARATOR: &str = "\n\n";

const PREFIX_HEAD: &str = "{P} is answering this question: ";

const STORY_INSTRUCTION: &str = "{P} is reminded of a specific past experience analogous to the situation and the most important information in this question. However, {P} refrains from forming conclusions or making guesses about the answer at this time.\n\
Write a possible experience as detailed and focused story in a paragraph that {P} may recall and conforms to the common practise. Do not use names in the question or mention the options in the story. Do not output extra sentences.";

const RULE_INSTRUCTION: &str = "{P} is reminded of specific commonsense rules relevant to the situation and the most important information in this question (without considering the options). However, {P} refrains from forming conclusions or making guesses about the answer at this time.\n\
List possible commonsense rules as simple knowledge sentences that {P} may recall in a paragraph. Do not output extra sentences.";

const ANSWER_BASE: &str =
    "Choose the most suitable answer for the question by selecting the answer letter and do not say anything else: ";

const READ_STORIES: &str = "Read these experiences:";
const READ_RULES: &str = "Read these commonsense rules:";

const ANSWER_STORY: &str = "Analogy to the above text as reference, choose the most suitable answer for the question by selecting the answer letter and do not include anything else: ";
const ANSWER_RULE: &str = "Based on the above text as reference, choose the most suitable answer for the question by selecting the answer letter and do not include anything else: ";
const ANSWER_BOTH: &str = "Based on the above experiences and commonsense rules as reference, choose the most suitable answer for the question by selecting the answer letter and do not include the option content or anything else: ";

const JUDGE_HEAD: &str =
    "Please evaluate the following sentences for common sense based on your commonsense knowledge:";
const JUDGE_TAIL: &str = "Does the sentences align with your common sense? Respond with \"yes\" or \"no\" only.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpressionKind {
    Story,
    Rule,
}

impl ExpressionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Story => "story",
            Self::Rule => "rule",
        }
    }
}

impl std::str::FromStr for ExpressionKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "story" => Ok(Self::Story),
            "rule" => Ok(Self::Rule),
            other => Err(format!("unknown expression kind {other:?} (story|rule)")),
        }
    }
}

impl std::fmt::Display for ExpressionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Base,
    Story,
    Rule,
    Both,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Self::Base, Self::Story, Self::Rule, Self::Both];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Story => "story",
            Self::Rule => "rule",
            Self::Both => "both",
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(Self::Base),
            "story" => Ok(Self::Story),
            "rule" => Ok(Self::Rule),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown condition {other:?} (base|story|rule|both)")),
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    CommonPrefix,
    GenStory,
    GenRule,
    AnswerBase,
    AnswerStory,
    AnswerRule,
    AnswerBoth,
    Judge,
}

impl PromptKind {
    pub fn takes_context(self) -> bool {
        matches!(
            self,
            Self::AnswerStory | Self::AnswerRule | Self::AnswerBoth | Self::Judge
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub kind: PromptKind,
    pub text: String,
    pub question_id: String,
    /// Digest of the included context texts; empty for contextless kinds.
    pub context_hash: String,
}

/// Context for an answer prompt, shaped by condition.
#[derive(Debug, Clone, Copy)]
pub enum AnswerContext<'a> {
    None,
    Stories(&'a [String]),
    Rules(&'a [String]),
    Both { stories: &'a [String], rules: &'a [String] },
}

impl AnswerContext<'_> {
    pub fn condition(&self) -> Condition {
        match self {
            Self::None => Condition::Base,
            Self::Stories(_) => Condition::Story,
            Self::Rules(_) => Condition::Rule,
            Self::Both { .. } => Condition::Both,
        }
    }

    pub fn digest(&self) -> String {
        match self {
            Self::None => String::new(),
            Self::Stories(s) | Self::Rules(s) => texts_digest(s),
            Self::Both { stories, rules } => {
                let mut all: Vec<&str> = stories.iter().map(String::as_str).collect();
                all.push("\u{0}rules\u{0}");
                all.extend(rules.iter().map(String::as_str));
                texts_digest(&all)
            }
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("condition {condition} needs {expected}")]
    Arity {
        condition: Condition,
        expected: &'static str,
    },
    #[error("judge prompt needs nonempty text")]
    EmptyText,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompter {
    pub persona: String,
}

impl Default for Prompter {
    fn default() -> Self {
        Self {
            persona: DEFAULT_PERSONA.to_string(),
        }
    }
}

impl Prompter {
    pub fn new(persona: impl Into<String>) -> Self {
        Self {
            persona: persona.into(),
        }
    }

    fn persona(&self, template: &str) -> String {
        template.replace("{P}", &self.persona)
    }

    pub fn common_prefix(&self, q: &QuestionRecord) -> String {
        let mut out = self.persona(PREFIX_HEAD);
        out.push_str("\nQuestion: ");
        out.push_str(&q.question_text);
        if !q.options.is_empty() {
            out.push_str("\nOptions: ");
            out.push_str(&q.options_line());
        }
        out
    }

    pub fn generation(&self, q: &QuestionRecord, kind: ExpressionKind) -> String {
        let instruction = match kind {
            ExpressionKind::Story => STORY_INSTRUCTION,
            ExpressionKind::Rule => RULE_INSTRUCTION,
        };
        format!("{}\n\n{}", self.common_prefix(q), self.persona(instruction))
    }

    pub fn answer(&self, q: &QuestionRecord, ctx: AnswerContext<'_>) -> Result<String, PromptError> {
        let tail = question_and_options(q);
        let arity = |expected| PromptError::Arity {
            condition: ctx.condition(),
            expected,
        };
        Ok(match ctx {
            AnswerContext::None => format!("{ANSWER_BASE}{tail}"),
            AnswerContext::Stories(stories) => {
                if stories.is_empty() {
                    return Err(arity("at least one story"));
                }
                format!(
                    "{READ_STORIES}\n{}\n{ANSWER_STORY}{tail}",
                    stories.join(CONTEXT_SEPARATOR)
                )
            }
            AnswerContext::Rules(rules) => {
                if rules.is_empty() {
                    return Err(arity("at least one rule"));
                }
                format!("{READ_RULES}\n{}\n{ANSWER_RULE}{tail}", rules.join(CONTEXT_SEPARATOR))
            }
            AnswerContext::Both { stories, rules } => {
                if stories.is_empty() || rules.is_empty() {
                    return Err(arity("a nonempty story group and a nonempty rule group"));
                }
                format!(
                    "{READ_STORIES}\n{}\n{READ_RULES}\n{}\n{ANSWER_BOTH}{tail}",
                    stories.join(CONTEXT_SEPARATOR),
                    rules.join(CONTEXT_SEPARATOR)
                )
            }
        })
    }

    pub fn judge(&self, text: &str) -> Result<String, PromptError> {
        if text.is_empty() {
            return Err(PromptError::EmptyText);
        }
        Ok(format!("{JUDGE_HEAD}\n{text}\n{JUDGE_TAIL}"))
    }

    pub fn generation_bundle(&self, q: &QuestionRecord, kind: ExpressionKind) -> PromptBundle {
        PromptBundle {
            kind: match kind {
                ExpressionKind::Story => PromptKind::GenStory,
                ExpressionKind::Rule => PromptKind::GenRule,
            },
            text: self.generation(q, kind),
            question_id: q.question_id.clone(),
            context_hash: String::new(),
        }
    }

    pub fn answer_bundle(&self, q: &QuestionRecord, ctx: AnswerContext<'_>) -> Result<PromptBundle, PromptError> {
        Ok(PromptBundle {
            kind: match ctx.condition() {
                Condition::Base => PromptKind::AnswerBase,
                Condition::Story => PromptKind::AnswerStory,
                Condition::Rule => PromptKind::AnswerRule,
                Condition::Both => PromptKind::AnswerBoth,
            },
            text: self.answer(q, ctx)?,
            question_id: q.question_id.clone(),
            context_hash: ctx.digest(),
        })
    }

    /// Digest over every template with this persona substituted; recorded
    /// in run manifests so prompt edits are visible.
    pub fn templates_digest(&self) -> String {
        let all = [
            self.persona(PREFIX_HEAD),
            self.persona(STORY_INSTRUCTION),
            self.persona(RULE_INSTRUCTION),
            ANSWER_BASE.to_string(),
            READ_STORIES.to_string(),
            READ_RULES.to_string(),
            ANSWER_STORY.to_string(),
            ANSWER_RULE.to_string(),
            ANSWER_BOTH.to_string(),
            JUDGE_HEAD.to_string(),
            JUDGE_TAIL.to_string(),
            CONTEXT_SEPARATOR.to_string(),
        ];
        texts_digest(&all)
    }
}

fn question_and_options(q: &QuestionRecord) -> String {
    if q.options.is_empty() {
        q.question_text.clone()
    } else {
        format!("{} {}", q.question_text, q.options_line())
    }
}

pub fn render_common_prefix(q: &QuestionRecord) -> String {
    Prompter::default().common_prefix(q)
}

pub fn render_generation_prompt(q: &QuestionRecord, kind: ExpressionKind) -> String {
    Prompter::default().generation(q, kind)
}

pub fn render_answer_prompt(q: &QuestionRecord, ctx: AnswerContext<'_>) -> Result<String, PromptError> {
    Prompter::default().answer(q, ctx)
}

pub fn render_judge_prompt(text: &str) -> Result<String, PromptError> {
    Prompter::default().judge(text)
}

pub fn prompt_digest(text: &str) -> String {
    sha256_hex(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::glue_stick;
    use crate::corpus::AnswerOption;

    #[test]
    fn glue_stick_prefix() {
        assert_eq!(
            render_common_prefix(&glue_stick()),
            "Jane is answering this question: \nQuestion: Where do adults use glue sticks?\nOptions: A. classroom, B. desk drawer, C. at school, D. office, E. kitchen drawer."
        );
    }

    #[test]
    fn yes_no_options_line() {
        let mut q = glue_stick();
        q.options = vec![AnswerOption::new("A", "yes"), AnswerOption::new("B", "no")];
        q.gold_label = Some("A".into());
        assert!(render_common_prefix(&q).ends_with("\nOptions: A. yes, B. no."));
    }

    #[test]
    fn fill_in_has_no_options_line() {
        let mut q = glue_stick();
        q.question_text = "a french horn has <how many> keys.".into();
        q.options.clear();
        q.gold_label = None;
        q.gold_text = Some("three".into());
        let p = render_common_prefix(&q);
        assert!(!p.contains("Options"));
        assert!(p.ends_with("<how many> keys."));
        let a = render_answer_prompt(&q, AnswerContext::None).unwrap();
        assert!(a.ends_with("anything else: a french horn has <how many> keys."));
    }

    #[test]
    fn persona_is_configurable() {
        let p = Prompter::new("Sam").generation(&glue_stick(), ExpressionKind::Rule);
        assert!(p.starts_with("Sam is answering"));
        assert!(!p.contains("Jane"));
        assert_ne!(
            Prompter::new("Sam").templates_digest(),
            Prompter::default().templates_digest()
        );
    }

    #[test]
    fn context_arity_errors() {
        let q = glue_stick();
        let stories = vec!["s".to_string()];
        let empty: Vec<String> = vec![];
        assert!(render_answer_prompt(&q, AnswerContext::Stories(&empty)).is_err());
        assert!(render_answer_prompt(&q, AnswerContext::Rules(&empty)).is_err());
        assert!(matches!(
            render_answer_prompt(
                &q,
                AnswerContext::Both {
                    stories: &stories,
                    rules: &empty
                }
            ),
            Err(PromptError::Arity {
                condition: Condition::Both,
                ..
            })
        ));
    }

    #[test]
    fn judge_keeps_whitespace() {
        let p = render_judge_prompt("  odd spacing \n").unwrap();
        assert!(p.contains(":\n  odd spacing \n\nDoes"));
        assert_eq!(render_judge_prompt(""), Err(PromptError::EmptyText));
    }

    #[test]
    fn prompts_never_leak_gold() {
        // Changing only the gold label must not change any rendered prompt.
        let q = glue_stick();
        let mut other = q.clone();
        other.gold_label = Some("A".into());
        for kind in [ExpressionKind::Story, ExpressionKind::Rule] {
            assert_eq!(
                render_generation_prompt(&q, kind),
                render_generation_prompt(&other, kind)
            );
        }
        assert_eq!(
            render_answer_prompt(&q, AnswerContext::None).unwrap(),
            render_answer_prompt(&other, AnswerContext::None).unwrap()
        );
    }

    #[test]
    fn bundles_carry_context_hash() {
        let q = glue_stick();
        let s = vec!["one".to_string(), "two".to_string()];
        let b = Prompter::default()
            .answer_bundle(&q, AnswerContext::Stories(&s))
            .unwrap();
        assert_eq!(b.kind, PromptKind::AnswerStory);
        assert!(!b.context_hash.is_empty());
        let g = Prompter::default().generation_bundle(&q, ExpressionKind::Story);
        assert!(g.context_hash.is_empty());
        assert!(!g.kind.takes_context());
    }
}
