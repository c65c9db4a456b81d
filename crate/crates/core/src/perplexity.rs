//! Perplexity and perplexity reduction.
//!
//! `PPL(t) = exp(-mean token logprob)` in natural-log base over the tokens
//! the endpoint returns. Perplexity reduction compares a text against
//! word-shuffled versions of itself:
//!
//! ```text
//! PR(t)       = mean_i PPL(shuffle_i(t)) - PPL(t)
//! PR([c,q,a]) = mean_i PPL([shuffle_i(c), q, a]) - PPL([c, q, a])
//! ```
//!
//! Shuffles split on whitespace, rejoin with single spaces, and use the
//! seed `derive_seed(seed, i)` for shuffle `i`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::gateway::{Endpoint, GatewayError, TokenLogprob};
use crate::prompting::ExpressionKind;
use crate::rng::{derive_seed, SplitMix64};

pub const DEFAULT_SHUFFLES: usize = 10;

/// Separator between context, question and answer in contextual scoring.
pub const PART_SEPARATOR: &str = "\n";

#[derive(Debug, Error)]
pub enum PerplexityError {
    #[error("no token logprobs to average")]
    Empty,
    #[error("logprob {0} is positive or non-finite")]
    BadLogprob(f64),
    #[error("n_shuffles must be at least 1")]
    NoShuffles,
    #[error("{0} is empty")]
    EmptyPart(&'static str),
    #[error("no answer tokens found after the prefix")]
    NoAnswerTokens,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleConfig {
    pub n_shuffles: usize,
    pub seed: u64,
}

impl ShuffleConfig {
    pub fn new(n_shuffles: usize, seed: u64) -> Self {
        Self { n_shuffles, seed }
    }

    fn validate(&self) -> Result<(), PerplexityError> {
        if self.n_shuffles == 0 {
            Err(PerplexityError::NoShuffles)
        } else {
            Ok(())
        }
    }

    pub fn shuffle_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, index as u64)
    }
}

impl Default for ShuffleConfig {
    fn default() -> Self {
        Self::new(DEFAULT_SHUFFLES, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityMeasurement {
    pub text_digest: String,
    pub ppl: f64,
    pub shuffled_ppl_mean: f64,
    pub pr: f64,
    pub n_shuffles: usize,
    pub seed: u64,
}

/// A measurement tied to the expression it was taken on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrRecord {
    pub expression_id: String,
    pub question_id: String,
    pub kind: ExpressionKind,
    #[serde(flatten)]
    pub measurement: PerplexityMeasurement,
}

impl PerplexityMeasurement {
    fn new(text: &str, ppl: f64, shuffled: &[f64], cfg: &ShuffleConfig) -> Self {
        // Running mean: equal inputs give back that value exactly.
        let shuffled_ppl_mean = shuffled
            .iter()
            .enumerate()
            .fold(0.0, |m, (i, x)| m + (x - m) / (i + 1) as f64);
        Self {
            text_digest: sha256_hex(text),
            ppl,
            shuffled_ppl_mean,
            pr: shuffled_ppl_mean - ppl,
            n_shuffles: shuffled.len(),
            seed: cfg.seed,
        }
    }
}

pub fn ppl_from_values(logprobs: &[f64]) -> Result<f64, PerplexityError> {
    if logprobs.is_empty() {
        return Err(PerplexityError::Empty);
    }
    let mut sum = 0.0;
    for &lp in logprobs {
        if !lp.is_finite() || lp > 0.0 {
            return Err(PerplexityError::BadLogprob(lp));
        }
        sum += lp;
    }
    Ok((-sum / logprobs.len() as f64).exp())
}

pub fn compute_ppl(logprobs: &[TokenLogprob]) -> Result<f64, PerplexityError> {
    let values: Vec<f64> = logprobs.iter().map(|t| t.logprob).collect();
    ppl_from_values(&values)
}

pub fn shuffle_words(text: &str, seed: u64) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut order: Vec<usize> = (0..words.len()).collect();
    SplitMix64::new(seed).shuffle(&mut order);
    // An identity permutation leaves the text itself, spacing included.
    if order.iter().enumerate().all(|(i, &j)| i == j) {
        return text.to_string();
    }
    order.iter().map(|&j| words[j]).collect::<Vec<_>>().join(" ")
}

/// Perplexity reduction of one text.
pub fn perplexity_reduction(
    text: &str,
    endpoint: &Endpoint,
    cfg: &ShuffleConfig,
) -> Result<PerplexityMeasurement, PerplexityError> {
    cfg.validate()?;
    if text.is_empty() {
        return Err(PerplexityError::EmptyPart("text"));
    }
    let ppl = compute_ppl(&endpoint.score_tokens(text)?)?;
    let shuffled: Vec<f64> = (0..cfg.n_shuffles)
        .map(|i| {
            let s = shuffle_words(text, cfg.shuffle_seed(i));
            compute_ppl(&endpoint.score_tokens(&s)?)
        })
        .collect::<Result<_, _>>()?;
    Ok(PerplexityMeasurement::new(text, ppl, &shuffled, cfg))
}

/// How the (context, question, answer) sequence is turned into a perplexity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextualMode {
    /// Perplexity over the full joined sequence.
    #[default]
    Literal,
    /// Perplexity over the answer tokens only, conditioned on the prefix.
    Conditional,
}

impl std::str::FromStr for ContextualMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "literal" => Ok(Self::Literal),
            "conditional" => Ok(Self::Conditional),
            other => Err(format!("unknown contextual mode {other:?} (literal|conditional)")),
        }
    }
}

impl ContextualMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Literal => "literal",
            Self::Conditional => "conditional",
        }
    }
}

fn sequence_ppl(
    context: &str,
    question: &str,
    answer: &str,
    endpoint: &Endpoint,
    mode: ContextualMode,
) -> Result<f64, PerplexityError> {
    let prefix = format!("{context}{PART_SEPARATOR}{question}{PART_SEPARATOR}");
    let full = format!("{prefix}{answer}");
    let tokens = endpoint.score_tokens(&full)?;
    match mode {
        ContextualMode::Literal => compute_ppl(&tokens),
        ContextualMode::Conditional => {
            // A token belongs to the answer when it ends past the prefix
            // boundary. End offsets are counted from the back because
            // leading tokens without a logprob may have been dropped.
            let boundary = prefix.len();
            let mut end = full.len();
            let mut answer_tokens = Vec::new();
            for t in tokens.into_iter().rev() {
                if end > boundary {
                    end -= t.token_text.len();
                    answer_tokens.push(t);
                } else {
                    break;
                }
            }
            answer_tokens.reverse();
            if answer_tokens.is_empty() {
                return Err(PerplexityError::NoAnswerTokens);
            }
            compute_ppl(&answer_tokens)
        }
    }
}

/// Perplexity reduction of `[context, question, answer]` with only the
/// context shuffled. Parts are joined by single newlines.
pub fn contextual_pr(
    context: &str,
    question: &str,
    answer: &str,
    endpoint: &Endpoint,
    cfg: &ShuffleConfig,
    mode: ContextualMode,
) -> Result<PerplexityMeasurement, PerplexityError> {
    cfg.validate()?;
    for (name, part) in [("context", context), ("question", question), ("answer", answer)] {
        if part.trim().is_empty() {
            return Err(PerplexityError::EmptyPart(name));
        }
    }
    let ppl = sequence_ppl(context, question, answer, endpoint, mode)?;
    let shuffled: Vec<f64> = (0..cfg.n_shuffles)
        .map(|i| {
            let c = shuffle_words(context, cfg.shuffle_seed(i));
            sequence_ppl(&c, question, answer, endpoint, mode)
        })
        .collect::<Result<_, _>>()?;
    let joined = format!("{context}{PART_SEPARATOR}{question}{PART_SEPARATOR}{answer}");
    Ok(PerplexityMeasurement::new(&joined, ppl, &shuffled, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{LogprobScript, MockBackend, MockScript, ModelEndpoint};
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn endpoint(logprobs: LogprobScript) -> Endpoint {
        let script = MockScript {
            logprobs,
            ..Default::default()
        };
        Endpoint::new(
            ModelEndpoint::mock("lm", "toy"),
            Arc::new(MockBackend::new(script)),
            None,
        )
    }

    #[test]
    fn ppl_examples() {
        let half = 0.5f64.ln();
        assert!((ppl_from_values(&[half, half]).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(ppl_from_values(&[0.0]).unwrap(), 1.0);
        let v = ppl_from_values(&[0.5f64.ln(), 0.8f64.ln()]).unwrap();
        assert!((v - 1.0 / 0.4f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ppl_errors() {
        assert!(matches!(ppl_from_values(&[]), Err(PerplexityError::Empty)));
        assert!(matches!(ppl_from_values(&[0.1]), Err(PerplexityError::BadLogprob(_))));
        assert!(matches!(
            ppl_from_values(&[f64::NAN]),
            Err(PerplexityError::BadLogprob(_))
        ));
        assert!(matches!(
            ppl_from_values(&[f64::NEG_INFINITY]),
            Err(PerplexityError::BadLogprob(_))
        ));
    }

    #[test]
    fn one_word_is_a_fixed_point() {
        assert_eq!(shuffle_words("hello", 3), "hello");
        let ep = endpoint(LogprobScript::Synthetic);
        let m = perplexity_reduction("hello", &ep, &ShuffleConfig::new(5, 1)).unwrap();
        assert_eq!(m.pr, 0.0);
        assert_eq!(m.n_shuffles, 5);
    }

    #[test]
    fn shuffle_rejoins_with_single_spaces() {
        let s = shuffle_words("a  b\n c", 11);
        let mut words: Vec<&str> = s.split(' ').collect();
        words.sort();
        assert_eq!(words, vec!["a", "b", "c"]);
    }

    #[test]
    fn identity_permutation_keeps_spacing() {
        assert_eq!(shuffle_words("  padded  ", 4), "  padded  ");
        let moved = (0..50).map(|s| shuffle_words(" x  y ", s)).find(|t| t != " x  y ");
        assert_eq!(moved.as_deref(), Some("y x"));
    }

    #[test]
    fn bigram_fixture_transposition() {
        let mut texts = BTreeMap::new();
        texts.insert("a b".to_string(), vec![0.5f64.ln(), 0.8f64.ln()]);
        texts.insert("b a".to_string(), vec![0.5f64.ln(), 0.2f64.ln()]);
        let ep = endpoint(LogprobScript::Table { texts, fallback: None });
        // Find a seed whose single shuffle is the transposition.
        let seed = (0..100u64)
            .find(|s| shuffle_words("a b", derive_seed(*s, 0)) == "b a")
            .unwrap();
        let m = perplexity_reduction("a b", &ep, &ShuffleConfig::new(1, seed)).unwrap();
        let expected = 1.0 / 0.1f64.sqrt() - 1.0 / 0.4f64.sqrt();
        assert!((m.pr - expected).abs() < 1e-9);
    }

    #[test]
    fn contextual_needs_all_parts() {
        let ep = endpoint(LogprobScript::Constant { logprob: -1.0 });
        let cfg = ShuffleConfig::new(2, 0);
        assert!(matches!(
            contextual_pr("", "q", "a", &ep, &cfg, ContextualMode::Literal),
            Err(PerplexityError::EmptyPart("context"))
        ));
        assert!(matches!(
            perplexity_reduction("x", &ep, &ShuffleConfig::new(0, 0)),
            Err(PerplexityError::NoShuffles)
        ));
    }

    #[test]
    fn conditional_mode_uses_answer_tokens_only() {
        // Fixture: every token has logprob ln 0.5 except the answer token.
        let full = "ctx words\nq?\nans";
        let mut texts = BTreeMap::new();
        texts.insert(
            full.to_string(),
            vec![0.5f64.ln(), 0.5f64.ln(), 0.5f64.ln(), 0.9f64.ln()],
        );
        let ep = endpoint(LogprobScript::Table {
            texts,
            fallback: Some(0.5f64.ln()),
        });
        let lit = sequence_ppl("ctx words", "q?", "ans", &ep, ContextualMode::Literal).unwrap();
        let cond = sequence_ppl("ctx words", "q?", "ans", &ep, ContextualMode::Conditional).unwrap();
        assert!((cond - 1.0 / 0.9).abs() < 1e-12);
        assert!(lit > cond);
    }

    #[test]
    fn pr_record_is_flat_and_round_trips() {
        let r = PrRecord {
            expression_id: "q:story:0:abcd1234".into(),
            question_id: "q".into(),
            kind: ExpressionKind::Story,
            measurement: PerplexityMeasurement {
                text_digest: "d".into(),
                ppl: 1.1,
                shuffled_ppl_mean: 1.3000000000000003,
                pr: 0.2000000000000002,
                n_shuffles: 10,
                seed: 7,
            },
        };
        let line = serde_json::to_string(&r).unwrap();
        assert!(line.contains("\"pr\":0.2000000000000002"));
        assert!(!line.contains("measurement"));
        assert_eq!(serde_json::from_str::<PrRecord>(&line).unwrap(), r);
    }
}
