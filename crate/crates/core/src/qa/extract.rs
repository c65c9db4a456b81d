//! Answer-letter extraction from free-form responses.
//!
//! The cascade, first hit wins:
//! 1. the whole response is a valid label, optionally wrapped in `( )` or
//!    followed by `.` or `)`;
//! 2. the response starts with a valid label followed by `.`, `)`, `:` or
//!    `,`, or by whitespace and that option's text;
//! 3. `answer is X`, `answer: X`, `option X` and similar phrases;
//! 4. exactly one option text occurs in the response as whole words.
//!
//! Anything else yields `None`.

use std::sync::OnceLock;

use regex::Regex;

use crate::corpus::AnswerOption;

const NUMBER_WORDS: [&str; 11] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
];

fn leading_label() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\(?([A-H])(?:[.):,]|\s*$)").expect("static regex"))
}

fn label_then_text() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([A-H])\s+(.+)").expect("static regex"))
}

fn answer_phrase() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i:answer|option|choice)(?:\s+(?i:is|would be|should be|will be))?\s*:?\s*\(?([A-H])(?:[.):,]|\s|$)",
        )
        .expect("static regex")
    })
}

fn clean(raw: &str) -> &str {
    raw.trim()
        .trim_matches(|c: char| matches!(c, '*' | '"' | '\'' | '`'))
        .trim()
}

fn rule_whole(s: &str, options: &[AnswerOption]) -> Option<String> {
    let s = s.strip_prefix('(').unwrap_or(s);
    let s = s.strip_suffix('.').or_else(|| s.strip_suffix(')')).unwrap_or(s).trim();
    let up = s.to_ascii_uppercase();
    options.iter().find(|o| o.label == up).map(|o| o.label.clone())
}

fn rule_leading(s: &str, options: &[AnswerOption]) -> Option<String> {
    if let Some(c) = leading_label().captures(s) {
        if let Some(o) = options.iter().find(|o| o.label == c[1]) {
            return Some(o.label.clone());
        }
    }
    let c = label_then_text().captures(s)?;
    let o = options.iter().find(|o| o.label == c[1])?;
    let rest = c[2].to_lowercase();
    let text = option_core(&o.text).to_lowercase();
    (!text.is_empty() && rest.starts_with(&text)).then(|| o.label.clone())
}

fn rule_phrase(s: &str, options: &[AnswerOption]) -> Option<String> {
    answer_phrase()
        .captures_iter(s)
        .find_map(|c| options.iter().find(|o| o.label == c[1]).map(|o| o.label.clone()))
}

fn option_core(text: &str) -> &str {
    text.trim().trim_end_matches(|c: char| c.is_ascii_punctuation()).trim()
}

fn contains_words(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let pattern = format!(r"(?i)(?:^|\W){}(?:\W|$)", regex::escape(needle));
    Regex::new(&pattern).map(|re| re.is_match(haystack)).unwrap_or(false)
}

fn rule_option_text(s: &str, options: &[AnswerOption]) -> Option<String> {
    let mut hits = options.iter().filter(|o| contains_words(s, option_core(&o.text)));
    let first = hits.next()?;
    hits.next().is_none().then(|| first.label.clone())
}

/// Extracts an option label; never returns a label not in `options`.
pub fn extract_label(raw: &str, options: &[AnswerOption]) -> Option<String> {
    if options.is_empty() {
        return None;
    }
    let s = clean(raw);
    if s.is_empty() {
        return None;
    }
    rule_whole(s, options)
        .or_else(|| rule_leading(s, options))
        .or_else(|| rule_phrase(s, options))
        .or_else(|| rule_option_text(s, options))
}

/// Lowercased word with digits 0–10 spelled out.
pub fn normalize_fill_in(word: &str) -> String {
    let w = word.trim().trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    match w.parse::<usize>() {
        Ok(n) if n < NUMBER_WORDS.len() => NUMBER_WORDS[n].to_string(),
        _ => w,
    }
}

/// Extracts a fill-in answer: the first number word or numeral in the
/// response, else the response itself when it is a single word.
pub fn extract_fill_in(raw: &str) -> Option<String> {
    let words: Vec<String> = raw
        .split_whitespace()
        .map(normalize_fill_in)
        .filter(|w| !w.is_empty())
        .collect();
    if let Some(w) = words
        .iter()
        .find(|w| NUMBER_WORDS.contains(&w.as_str()) || w.chars().all(|c| c.is_ascii_digit()))
    {
        return Some(w.clone());
    }
    match words.as_slice() {
        [only] => Some(only.clone()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::glue_stick;
    use proptest::prelude::*;

    fn glue() -> Vec<AnswerOption> {
        glue_stick().options
    }

    #[test]
    fn each_rule() {
        let o = glue();
        assert_eq!(extract_label("A", &o).as_deref(), Some("A"));
        assert_eq!(extract_label("E. kitchen drawer", &o).as_deref(), Some("E"));
        assert_eq!(
            extract_label("The most suitable answer is D. office", &o).as_deref(),
            Some("D")
        );
        assert_eq!(
            extract_label("office is where adults use them", &o).as_deref(),
            Some("D")
        );
        assert_eq!(extract_label("I cannot determine", &o), None);
    }

    #[test]
    fn article_a_is_not_a_label() {
        let o = glue();
        assert_eq!(
            extract_label("A person would use one in an office.", &o).as_deref(),
            Some("D")
        );
    }

    #[test]
    fn ambiguous_option_text_is_none() {
        assert_eq!(extract_label("the office or the classroom", &glue()), None);
    }

    #[test]
    fn fill_in() {
        assert_eq!(extract_fill_in("3").as_deref(), Some("three"));
        assert_eq!(extract_fill_in("Birds have two legs.").as_deref(), Some("two"));
        assert_eq!(extract_fill_in("Four.").as_deref(), Some("four"));
        assert_eq!(extract_fill_in("many").as_deref(), Some("many"));
        assert_eq!(extract_fill_in("I am not sure"), None);
    }

    proptest! {
        #[test]
        fn never_outside_labels(raw in ".{0,60}", n in 1usize..6) {
            let opts: Vec<AnswerOption> = glue().into_iter().take(n).collect();
            if let Some(l) = extract_label(&raw, &opts) {
                prop_assert!(opts.iter().any(|o| o.label == l));
            }
        }
    }
}
