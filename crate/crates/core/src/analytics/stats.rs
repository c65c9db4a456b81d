//! Paired significance tests and correlation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use super::AnalyticsError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test: String,
    pub n: usize,
    pub mean_diff: f64,
    /// `None` with a note in degenerate cases.
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// A two-sided test on paired samples.
pub trait PairedTest: Send + Sync {
    fn name(&self) -> &'static str;
    fn run(&self, xs: &[f64], ys: &[f64]) -> Result<TestResult, AnalyticsError>;
}

fn check_pairs(xs: &[f64], ys: &[f64]) -> Result<Vec<f64>, AnalyticsError> {
    if xs.len() != ys.len() {
        return Err(AnalyticsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(AnalyticsError::TooFew(xs.len()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(AnalyticsError::NonFinite);
    }
    Ok(xs.iter().zip(ys).map(|(x, y)| x - y).collect())
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n - 1); 0 for fewer than two values.
pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Normal-approximation 95% half-width, `1.96 * sd / sqrt(n)`.
pub fn ci95_half_width(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    1.96 * sample_sd(v) / (v.len() as f64).sqrt()
}

fn two_sided_t(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
}

pub struct PairedT;

impl PairedTest for PairedT {
    fn name(&self) -> &'static str {
        "paired-t"
    }

    fn run(&self, xs: &[f64], ys: &[f64]) -> Result<TestResult, AnalyticsError> {
        let d = check_pairs(xs, ys)?;
        let n = d.len();
        let m = mean(&d);
        let sd = sample_sd(&d);
        if sd == 0.0 {
            return Ok(TestResult {
                test: self.name().into(),
                n,
                mean_diff: m,
                statistic: None,
                p_value: None,
                note: Some("zero-variance differences".into()),
            });
        }
        let t = m / (sd / (n as f64).sqrt());
        Ok(TestResult {
            test: self.name().into(),
            n,
            mean_diff: m,
            statistic: Some(t),
            p_value: Some(two_sided_t(t, (n - 1) as f64)),
            note: None,
        })
    }
}

/// Average ranks (1-based) of `v`, ties sharing their mean rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Wilcoxon signed-rank test with zero differences dropped and the
/// tie-corrected normal approximation. The statistic is `min(W+, W-)`.
pub struct Wilcoxon;

impl PairedTest for Wilcoxon {
    fn name(&self) -> &'static str {
        "wilcoxon"
    }

    fn run(&self, xs: &[f64], ys: &[f64]) -> Result<TestResult, AnalyticsError> {
        let d = check_pairs(xs, ys)?;
        let mean_diff = mean(&d);
        let nz: Vec<f64> = d.into_iter().filter(|x| *x != 0.0).collect();
        let n = nz.len();
        let degenerate = |note: &str| TestResult {
            test: "wilcoxon".into(),
            n,
            mean_diff,
            statistic: None,
            p_value: None,
            note: Some(note.into()),
        };
        if n == 0 {
            return Ok(degenerate("all differences are zero"));
        }
        let abs: Vec<f64> = nz.iter().map(|x| x.abs()).collect();
        let ranks = average_ranks(&abs);
        let w_plus: f64 = nz.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
        let nf = n as f64;
        let total = nf * (nf + 1.0) / 2.0;
        let mut ties: BTreeMap<u64, usize> = BTreeMap::new();
        for a in &abs {
            *ties.entry(a.to_bits()).or_default() += 1;
        }
        let tie_term: f64 = ties.values().map(|&t| (t as f64).powi(3) - t as f64).sum::<f64>() / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        if var <= 0.0 {
            return Ok(degenerate("zero-variance ranks"));
        }
        let z = (w_plus - total / 2.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        Ok(TestResult {
            test: self.name().into(),
            n,
            mean_diff,
            statistic: Some(w_plus.min(total - w_plus)),
            p_value: Some((2.0 * normal.sf(z.abs())).clamp(0.0, 1.0)),
            note: Some("normal approximation".into()),
        })
    }
}

pub struct TestRegistry {
    tests: BTreeMap<&'static str, Box<dyn PairedTest>>,
}

impl TestRegistry {
    pub fn empty() -> Self {
        Self { tests: BTreeMap::new() }
    }

    pub fn register(&mut self, t: Box<dyn PairedTest>) {
        self.tests.insert(t.name(), t);
    }

    pub fn get(&self, name: &str) -> Result<&dyn PairedTest, AnalyticsError> {
        self.tests
            .get(name)
            .map(|t| t.as_ref())
            .ok_or_else(|| AnalyticsError::UnknownTest(name.to_string()))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.tests.keys().copied().collect()
    }
}

impl Default for TestRegistry {
    fn default() -> Self {
        let mut reg = Self::empty();
        reg.register(Box::new(PairedT));
        reg.register(Box::new(Wilcoxon));
        reg
    }
}

pub fn paired_difference_test(xs: &[f64], ys: &[f64]) -> Result<TestResult, AnalyticsError> {
    PairedT.run(xs, ys)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p_value: f64,
    pub n: usize,
}

/// Pearson correlation with a two-sided p-value from the t transform.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Correlation, AnalyticsError> {
    if xs.len() != ys.len() {
        return Err(AnalyticsError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 3 {
        return Err(AnalyticsError::TooFew(n));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(AnalyticsError::NonFinite);
    }
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalyticsError::ZeroVariance);
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let p_value = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * ((n as f64 - 2.0) / (1.0 - r * r)).sqrt();
        two_sided_t(t, n as f64 - 2.0)
    };
    Ok(Correlation { r, p_value, n })
}
