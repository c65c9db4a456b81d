//! Choosing which helpful stories become training data.

use std::collections::BTreeMap;

use crate::elicit::Expression;
use crate::scoring::ScoredStory;

use super::SelfSftError;

/// `max(1, round_half_up(k_percent / 100 * n))`.
pub fn retain_count(n: usize, k_percent: f64) -> usize {
    let exact = k_percent * n as f64 / 100.0;
    ((exact + 0.5).floor() as usize).clamp(1, n.max(1))
}

/// Sorts by total descending, ties by (question_id, expression_id), and
/// keeps the top [`retain_count`] stories.
pub fn filter_topk(scored: &[ScoredStory], k_percent: f64) -> Vec<ScoredStory> {
    if scored.is_empty() {
        return Vec::new();
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| {
        b.total
            .total_cmp(&a.total)
            .then_with(|| a.question_id.cmp(&b.question_id))
            .then_with(|| a.expression_id.cmp(&b.expression_id))
    });
    sorted.truncate(retain_count(scored.len(), k_percent));
    sorted
}

pub fn validate_k(k_percent: f64) -> Result<(), SelfSftError> {
    if k_percent > 0.0 && k_percent <= 100.0 {
        Ok(())
    } else {
        Err(SelfSftError::InvalidK(k_percent))
    }
}

/// Picks training stories out of the helpful pool.
pub trait SelectionStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    /// Whether [`Self::select`] reads scores; when false the loop skips
    /// scoring the pool.
    fn uses_scores(&self) -> bool;
    /// Retained expression ids in training order.
    fn select(&self, helpful: &[Expression], scores: &[ScoredStory], k_percent: f64) -> Vec<String>;
}

/// Top K% by total score.
pub struct TopK;

impl SelectionStrategy for TopK {
    fn name(&self) -> &'static str {
        "topk"
    }
    fn uses_scores(&self) -> bool {
        true
    }
    fn select(&self, _helpful: &[Expression], scores: &[ScoredStory], k_percent: f64) -> Vec<String> {
        filter_topk(scores, k_percent)
            .into_iter()
            .map(|s| s.expression_id)
            .collect()
    }
}

/// Every helpful story, in pool order.
pub struct AllHelpful;

impl SelectionStrategy for AllHelpful {
    fn name(&self) -> &'static str {
        "helpful"
    }
    fn uses_scores(&self) -> bool {
        false
    }
    fn select(&self, helpful: &[Expression], _scores: &[ScoredStory], _k_percent: f64) -> Vec<String> {
        helpful.iter().map(|e| e.expression_id.clone()).collect()
    }
}

pub struct StrategyRegistry {
    strategies: BTreeMap<&'static str, Box<dyn SelectionStrategy>>,
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        Self {
            strategies: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, s: Box<dyn SelectionStrategy>) {
        self.strategies.insert(s.name(), s);
    }

    pub fn get(&self, name: &str) -> Result<&dyn SelectionStrategy, SelfSftError> {
        self.strategies
            .get(name)
            .map(|s| s.as_ref())
            .ok_or_else(|| SelfSftError::Unknown(format!("selection strategy {name:?}")))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.strategies.keys().copied().collect()
    }
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        let mut reg = Self::empty();
        reg.register(Box::new(TopK));
        reg.register(Box::new(AllHelpful));
        reg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn story(q: &str, e: &str, total: f64) -> ScoredStory {
        ScoredStory::new(e, q, total / 2.0, total / 2.0)
    }

    #[test]
    fn counts() {
        assert_eq!(retain_count(10, 50.0), 5);
        assert_eq!(retain_count(1, 10.0), 1);
        assert_eq!(retain_count(7, 50.0), 4);
        assert_eq!(retain_count(5, 30.0), 2);
        assert_eq!(retain_count(3, 100.0), 3);
    }

    #[test]
    fn top_half_of_ten() {
        let s: Vec<ScoredStory> = (0..10).map(|i| story("q", &format!("e{i}"), i as f64 / 10.0)).collect();
        let kept: Vec<String> = filter_topk(&s, 50.0).into_iter().map(|s| s.expression_id).collect();
        assert_eq!(kept, vec!["e9", "e8", "e7", "e6", "e5"]);
    }

    #[test]
    fn ties_break_by_ids() {
        let s = vec![story("q2", "a", 1.0), story("q1", "b", 1.0), story("q1", "a", 1.0)];
        let kept: Vec<(String, String)> = filter_topk(&s, 100.0)
            .into_iter()
            .map(|s| (s.question_id, s.expression_id))
            .collect();
        assert_eq!(
            kept,
            vec![
                ("q1".into(), "a".into()),
                ("q1".into(), "b".into()),
                ("q2".into(), "a".into())
            ]
        );
    }

    #[test]
    fn k_bounds() {
        assert!(validate_k(0.0).is_err());
        assert!(validate_k(100.5).is_err());
        assert!(validate_k(f64::NAN).is_err());
        assert!(validate_k(100.0).is_ok());
    }

    proptest! {
        #[test]
        fn subset_with_expected_size(totals in prop::collection::vec(0u8..5, 1..40), k in 1u32..=100) {
            let s: Vec<ScoredStory> = totals.iter().enumerate()
                .map(|(i, t)| story(&format!("q{}", i % 3), &format!("e{i}"), *t as f64 / 2.0))
                .collect();
            let out = filter_topk(&s, k as f64);
            prop_assert_eq!(out.len(), retain_count(s.len(), k as f64));
            for o in &out {
                prop_assert!(s.contains(o));
            }
            let min_kept = out.iter().map(|o| o.total).fold(f64::INFINITY, f64::min);
            for x in s.iter().filter(|x| !out.contains(x)) {
                prop_assert!(x.total <= min_kept);
            }
        }
    }
}
