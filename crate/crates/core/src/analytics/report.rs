//! Report tables computed only from the contents of a run directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{
    ci95_half_width, error_type_summary, mean, negation_asymmetry, pearson, sample_sd, AnalyticsError, ErrorAnnotation,
    PairedTest,
};
use crate::artifacts::{read_json, read_jsonl, write_atomic, ArtifactError};
use crate::corpus::QuestionRecord;
use crate::elicit::{Judgment, Verdict};
use crate::perplexity::PrRecord;
use crate::prompting::{Condition, ExpressionKind};
use crate::qa::{accuracy, condition_delta, AccuracyRow, AnswerRecord};
use crate::run::{RunError, RunLayout, RunManifest};
use crate::scoring::ScoredStory;
use crate::selfsft::{score_trajectory, state_path, IterationState};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("missing artifact {0}")]
    Missing(PathBuf),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Artifact(ArtifactError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error("{0}")]
    Data(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl From<ArtifactError> for ReportError {
    fn from(e: ArtifactError) -> Self {
        match e {
            ArtifactError::Missing(p) => Self::Missing(p),
            other => Self::Artifact(other),
        }
    }
}

/// One report table, written as CSV and echoed in the markdown summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub file: &'static str,
    pub title: &'static str,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(file: &'static str, title: &'static str, header: &[&'static str]) -> Self {
        Self {
            file,
            title,
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> Result<String, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| ReportError::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    fn to_markdown(&self) -> String {
        let mut out = format!("## {}\n\n", self.title);
        if self.rows.is_empty() {
            out.push_str("No data.\n\n");
            return out;
        }
        out.push_str(&format!("| {} |\n", self.header.join(" | ")));
        out.push_str(&format!("|{}\n", "---|".repeat(self.header.len())));
        for r in &self.rows {
            out.push_str(&format!("| {} |\n", r.join(" | ")));
        }
        out.push('\n');
        out
    }
}

fn f(x: f64) -> String {
    format!("{x:.6}")
}

fn opt(x: Option<f64>) -> String {
    x.map(f).unwrap_or_default()
}

/// Files in `dir` with the given extension, sorted by name.
fn listing(dir: &Path, suffix: &str) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map(|rd| {
            rd.flatten()
                .map(|e| e.path())
                .filter(|p| p.is_file() && p.to_string_lossy().ends_with(suffix))
                .collect()
        })
        .unwrap_or_default();
    out.sort();
    out
}

/// `csqa.story.jsonl` with suffix `.jsonl` → `["csqa", "story"]`; the last
/// `parts - 1` fields are split from the right so dataset ids may hold dots.
fn name_fields(path: &Path, suffix: &str, parts: usize) -> Option<Vec<String>> {
    let name = path.file_name()?.to_string_lossy();
    let mut stem = name.strip_suffix(suffix)?.to_string();
    let mut tail = Vec::new();
    for _ in 1..parts {
        let (head, last) = stem.rsplit_once('.')?;
        tail.push(last.to_string());
        stem = head.to_string();
    }
    tail.push(stem);
    tail.reverse();
    Some(tail)
}

/// Checks recorded digests and that every artifact came from one config.
pub fn check_manifest(layout: &RunLayout) -> Result<RunManifest, ReportError> {
    let manifest = RunManifest::load(&layout.manifest())?.ok_or_else(|| ReportError::Missing(layout.manifest()))?;
    manifest.verify_under(&layout.root, "artifacts/")?;
    let digests: BTreeSet<&str> = manifest
        .latest_outputs()
        .into_iter()
        .filter(|(p, _)| p.starts_with("artifacts/"))
        .map(|(_, (s, _))| s.config_digest.as_str())
        .collect();
    if digests.len() > 1 {
        let mut detail = Vec::new();
        for d in &digests {
            let paths: Vec<&str> = manifest
                .latest_outputs()
                .into_iter()
                .filter(|(p, (s, _))| p.starts_with("artifacts/") && s.config_digest == *d)
                .map(|(p, _)| p)
                .collect();
            detail.push(format!("{} [{}]", &d[..12.min(d.len())], paths.join(", ")));
        }
        return Err(RunError::MixedConfigs(detail.join("; ")).into());
    }
    Ok(manifest)
}

fn accuracy_tables(layout: &RunLayout) -> Result<(Table, Table, Vec<AccuracyRow>), ReportError> {
    let mut records: Vec<AnswerRecord> = Vec::new();
    for p in listing(&layout.artifacts().join("answers"), ".jsonl") {
        records.extend(read_jsonl::<AnswerRecord>(&p)?);
    }
    let mut acc = Table::new(
        "accuracy.csv",
        "Answer accuracy",
        &[
            "dataset_id",
            "condition",
            "n",
            "correct",
            "accuracy",
            "extraction_failures",
        ],
    );
    let mut deltas = Table::new(
        "deltas.csv",
        "Accuracy differences between conditions",
        &["a", "b", "dataset_id", "accuracy_a", "accuracy_b", "delta"],
    );
    if records.is_empty() {
        return Ok((acc, deltas, Vec::new()));
    }
    let rows = accuracy(&records).map_err(|e| ReportError::Data(e.to_string()))?;
    for r in &rows {
        acc.rows.push(vec![
            r.dataset_id.clone(),
            r.condition.to_string(),
            r.n.to_string(),
            r.correct.to_string(),
            f(r.accuracy),
            r.extraction_failures.to_string(),
        ]);
    }
    let pairs = [
        (Condition::Story, Condition::Base),
        (Condition::Rule, Condition::Base),
        (Condition::Both, Condition::Base),
        (Condition::Story, Condition::Rule),
    ];
    for (a, b) in pairs {
        let has = |d: &str, c: Condition| rows.iter().any(|r| r.dataset_id == d && r.condition == c);
        let subset: Vec<AccuracyRow> = rows
            .iter()
            .filter(|r| has(&r.dataset_id, a) && has(&r.dataset_id, b))
            .cloned()
            .collect();
        if subset.is_empty() {
            continue;
        }
        let ds = condition_delta(&subset, a, b).map_err(|e| ReportError::Data(e.to_string()))?;
        for d in ds {
            deltas.rows.push(vec![
                a.to_string(),
                b.to_string(),
                d.dataset_id,
                f(d.accuracy_a),
                f(d.accuracy_b),
                f(d.delta),
            ]);
        }
    }
    Ok((acc, deltas, rows))
}

/// (measure, dataset, kind) → records.
type PrGroups = BTreeMap<(String, String, ExpressionKind), Vec<PrRecord>>;

fn pr_groups(layout: &RunLayout) -> Result<PrGroups, ReportError> {
    let mut groups = PrGroups::new();
    for p in listing(&layout.artifacts().join("pr"), ".jsonl") {
        let Some(fields) = name_fields(&p, ".jsonl", 2) else {
            continue;
        };
        let recs: Vec<PrRecord> = read_jsonl(&p)?;
        let kind = fields[1].parse().map_err(ReportError::Data)?;
        groups.insert(("pr".into(), fields[0].clone(), kind), recs);
    }
    for p in listing(&layout.artifacts().join("contextual_pr"), ".jsonl") {
        let Some(fields) = name_fields(&p, ".jsonl", 3) else {
            continue;
        };
        let recs: Vec<PrRecord> = read_jsonl(&p)?;
        let kind = fields[1].parse().map_err(ReportError::Data)?;
        groups.insert((format!("contextual_{}", fields[2]), fields[0].clone(), kind), recs);
    }
    Ok(groups)
}

fn pr_tables(groups: &PrGroups, test: &dyn PairedTest) -> Result<(Table, Table, Table), ReportError> {
    let mut summary = Table::new(
        "pr_summary.csv",
        "Perplexity reduction",
        &[
            "measure",
            "dataset_id",
            "kind",
            "n",
            "mean_pr",
            "sd_pr",
            "ci95_pr",
            "positive_share",
        ],
    );
    let mut points = Table::new(
        "pr_points.csv",
        "Perplexity reduction per expression",
        &["measure", "dataset_id", "kind", "question_id", "expression_id", "pr"],
    );
    let mut tests = Table::new(
        "pr_tests.csv",
        "Stories vs rules, paired by question",
        &[
            "measure",
            "dataset_id",
            "test",
            "n",
            "mean_diff",
            "statistic",
            "p_value",
            "note",
        ],
    );
    for ((measure, d, kind), recs) in groups {
        let prs: Vec<f64> = recs.iter().map(|r| r.measurement.pr).collect();
        let positive = prs.iter().filter(|p| **p > 0.0).count();
        let (m, sd, ci, share) = if prs.is_empty() {
            (String::new(), String::new(), String::new(), String::new())
        } else {
            (
                f(mean(&prs)),
                f(sample_sd(&prs)),
                f(ci95_half_width(&prs)),
                f(positive as f64 / prs.len() as f64),
            )
        };
        summary.rows.push(vec![
            measure.clone(),
            d.clone(),
            kind.to_string(),
            prs.len().to_string(),
            m,
            sd,
            ci,
            share,
        ]);
        for r in recs {
            points.rows.push(vec![
                measure.clone(),
                d.clone(),
                kind.to_string(),
                r.question_id.clone(),
                r.expression_id.clone(),
                f(r.measurement.pr),
            ]);
        }
    }
    let per_question = |recs: &[PrRecord]| -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in recs {
            acc.entry(r.question_id.clone()).or_default().push(r.measurement.pr);
        }
        acc.into_iter().map(|(q, v)| (q, mean(&v))).collect()
    };
    for ((measure, d, kind), stories) in groups {
        if *kind != ExpressionKind::Story {
            continue;
        }
        let Some(rules) = groups.get(&(measure.clone(), d.clone(), ExpressionKind::Rule)) else {
            continue;
        };
        let (s, r) = (per_question(stories), per_question(rules));
        let (xs, ys): (Vec<f64>, Vec<f64>) = s.iter().filter_map(|(q, x)| r.get(q).map(|y| (*x, *y))).unzip();
        let row = match test.run(&xs, &ys) {
            Ok(t) => vec![
                measure.clone(),
                d.clone(),
                t.test,
                t.n.to_string(),
                f(t.mean_diff),
                opt(t.statistic),
                opt(t.p_value),
                t.note.unwrap_or_default(),
            ],
            Err(e) => vec![
                measure.clone(),
                d.clone(),
                test.name().to_string(),
                xs.len().to_string(),
                String::new(),
                String::new(),
                String::new(),
                e.to_string(),
            ],
        };
        tests.rows.push(row);
    }
    Ok((summary, points, tests))
}

fn commonsense_table(layout: &RunLayout) -> Result<Table, ReportError> {
    let mut t = Table::new(
        "commonsense_accuracy.csv",
        "Judged commonsense accuracy",
        &[
            "dataset_id",
            "kind",
            "judged",
            "yes",
            "counted",
            "unparseable",
            "accuracy",
        ],
    );
    for p in listing(&layout.artifacts().join("judgments"), ".jsonl") {
        let Some(fields) = name_fields(&p, ".jsonl", 2) else {
            continue;
        };
        let js: Vec<Judgment> = read_jsonl(&p)?;
        let yes = js.iter().filter(|j| j.verdict == Verdict::Yes).count();
        let bad = js.iter().filter(|j| j.verdict == Verdict::Unparseable).count();
        let counted = js.len() - bad;
        let acc = (counted > 0).then(|| yes as f64 / counted as f64);
        t.rows.push(vec![
            fields[0].clone(),
            fields[1].clone(),
            js.len().to_string(),
            yes.to_string(),
            counted.to_string(),
            bad.to_string(),
            opt(acc),
        ]);
    }
    Ok(t)
}

fn all_scores(layout: &RunLayout) -> Result<BTreeMap<String, (String, ScoredStory)>, ReportError> {
    let mut out = BTreeMap::new();
    for p in listing(&layout.artifacts().join("scores"), ".jsonl") {
        let Some(fields) = name_fields(&p, ".jsonl", 1) else {
            continue;
        };
        for s in read_jsonl::<ScoredStory>(&p)? {
            out.insert(s.expression_id.clone(), (fields[0].clone(), s));
        }
    }
    Ok(out)
}

fn error_table(layout: &RunLayout, scores: &BTreeMap<String, (String, ScoredStory)>) -> Result<Table, ReportError> {
    let mut t = Table::new(
        "error_types.csv",
        "Story error types",
        &[
            "error_type",
            "count",
            "share",
            "mean_commonsense",
            "ci95_commonsense",
            "mean_similarity",
            "ci95_similarity",
        ],
    );
    let path = layout.errors();
    if !path.exists() {
        return Ok(t);
    }
    let annotations: Vec<ErrorAnnotation> = read_jsonl(&path)?;
    if annotations.is_empty() {
        return Ok(t);
    }
    let lookup: BTreeMap<String, ScoredStory> = scores.iter().map(|(k, (_, s))| (k.clone(), s.clone())).collect();
    for r in error_type_summary(&annotations, &lookup)? {
        t.rows.push(vec![
            r.error_type.as_str().to_string(),
            r.count.to_string(),
            f(r.share),
            f(r.mean_commonsense),
            f(r.ci95_commonsense),
            f(r.mean_similarity),
            f(r.ci95_similarity),
        ]);
    }
    Ok(t)
}

fn load_states(dir: &Path) -> Result<Vec<IterationState>, ReportError> {
    let base = dir.join("baseline.json");
    if !base.exists() {
        return Ok(Vec::new());
    }
    let mut states: Vec<IterationState> = vec![read_json(&base)?];
    let mut i = 1;
    while state_path(dir, i).exists() {
        states.push(read_json(&state_path(dir, i))?);
        i += 1;
    }
    Ok(states)
}

fn trajectory_tables(layout: &RunLayout) -> Result<(Table, Table), ReportError> {
    let mut traj = Table::new(
        "trajectory.csv",
        "Story score trajectory",
        &["iteration", "mean_total_train", "mean_total_eval"],
    );
    let mut iters = Table::new(
        "iterations.csv",
        "Self-training iterations",
        &[
            "loop",
            "iteration",
            "model_ref",
            "strategy",
            "k_percent",
            "helpful_pool_size",
            "train_example_count",
            "final_loss",
        ],
    );
    for (name, dir) in [("selfsft", layout.selfsft()), ("naive", layout.selfsft_naive())] {
        let states = load_states(&dir)?;
        if states.is_empty() {
            continue;
        }
        if name == "selfsft" {
            for p in score_trajectory(&states).map_err(|e| ReportError::Data(e.to_string()))? {
                traj.rows.push(vec![
                    p.iteration.to_string(),
                    f(p.mean_total_train),
                    f(p.mean_total_eval),
                ]);
            }
        }
        for s in &states {
            iters.rows.push(vec![
                name.to_string(),
                s.iteration.to_string(),
                s.model_ref.clone(),
                s.strategy.clone(),
                f(s.k_percent),
                s.helpful_pool_size.to_string(),
                s.train_example_count.to_string(),
                opt(s.epoch_losses.last().copied()),
            ]);
        }
    }
    Ok((traj, iters))
}

fn dataset_questions(layout: &RunLayout, d: &str) -> Result<Option<Vec<QuestionRecord>>, ReportError> {
    for p in [layout.dataset(d), layout.questions(d)] {
        if p.exists() {
            return Ok(Some(read_jsonl(&p)?));
        }
    }
    Ok(None)
}

fn negation_table(layout: &RunLayout) -> Result<Table, ReportError> {
    let mut t = Table::new(
        "negation.csv",
        "Wrong answers on yes/no datasets",
        &[
            "dataset_id",
            "condition",
            "errors",
            "gold_no_pred_yes",
            "gold_yes_pred_no",
            "frac_gold_no_pred_yes",
            "frac_gold_yes_pred_no",
            "extraction_failures",
            "note",
        ],
    );
    let mut by_cell: BTreeMap<(String, Condition), Vec<AnswerRecord>> = BTreeMap::new();
    for p in listing(&layout.artifacts().join("answers"), ".jsonl") {
        for r in read_jsonl::<AnswerRecord>(&p)? {
            by_cell.entry((r.dataset_id.clone(), r.condition)).or_default().push(r);
        }
    }
    let mut questions: BTreeMap<String, Option<BTreeMap<String, QuestionRecord>>> = BTreeMap::new();
    for ((d, cond), recs) in &by_cell {
        if !questions.contains_key(d) {
            let qs = dataset_questions(layout, d)?
                .filter(|qs| !qs.is_empty() && qs.iter().all(QuestionRecord::is_yes_no))
                .map(|qs| qs.into_iter().map(|q| (q.question_id.clone(), q)).collect());
            questions.insert(d.clone(), qs);
        }
        let Some(Some(lookup)) = questions.get(d) else { continue };
        let n = negation_asymmetry(recs, lookup)?;
        t.rows.push(vec![
            d.clone(),
            cond.to_string(),
            n.errors.to_string(),
            n.gold_no_pred_yes.to_string(),
            n.gold_yes_pred_no.to_string(),
            f(n.frac_gold_no_pred_yes),
            f(n.frac_gold_yes_pred_no),
            n.extraction_failures.to_string(),
            n.note.unwrap_or_default(),
        ]);
    }
    Ok(t)
}

/// Dataset-level story-condition accuracy against mean story scores.
fn correlation_table(rows: &[AccuracyRow], scores: &BTreeMap<String, (String, ScoredStory)>) -> Table {
    let mut t = Table::new(
        "correlation.csv",
        "Dataset-level correlation with story-condition accuracy",
        &["x", "y", "n", "r", "p_value", "note"],
    );
    let mut per_dataset: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (d, s) in scores.values() {
        let e = per_dataset.entry(d.as_str()).or_default();
        e.0.push(s.commonsense);
        e.1.push(s.similarity);
    }
    let mut acc = Vec::new();
    let (mut cs, mut sim) = (Vec::new(), Vec::new());
    for r in rows.iter().filter(|r| r.condition == Condition::Story) {
        if let Some((c, s)) = per_dataset.get(r.dataset_id.as_str()) {
            acc.push(r.accuracy);
            cs.push(mean(c));
            sim.push(mean(s));
        }
    }
    if acc.is_empty() {
        return t;
    }
    for (name, ys) in [("mean_commonsense", &cs), ("mean_similarity", &sim)] {
        t.rows.push(match pearson(&acc, ys) {
            Ok(c) => vec![
                "story_accuracy".into(),
                name.into(),
                c.n.to_string(),
                f(c.r),
                f(c.p_value),
                String::new(),
            ],
            Err(e) => vec![
                "story_accuracy".into(),
                name.into(),
                acc.len().to_string(),
                String::new(),
                String::new(),
                e.to_string(),
            ],
        });
    }
    t
}

/// Builds every table from the run directory.
pub fn build_tables(layout: &RunLayout, test: &dyn PairedTest) -> Result<Vec<Table>, ReportError> {
    let (acc, deltas, acc_rows) = accuracy_tables(layout)?;
    let (pr_summary, pr_points, pr_tests) = pr_tables(&pr_groups(layout)?, test)?;
    let scores = all_scores(layout)?;
    let errors = error_table(layout, &scores)?;
    let (traj, iters) = trajectory_tables(layout)?;
    Ok(vec![
        acc,
        deltas,
        pr_summary,
        pr_tests,
        pr_points,
        commonsense_table(layout)?,
        errors,
        traj,
        iters,
        negation_table(layout)?,
        correlation_table(&acc_rows, &scores),
    ])
}

/// Checks the manifest, then writes every table plus `summary.md` under
/// `report/`. Output bytes depend only on the run directory and the test.
pub fn emit_report(layout: &RunLayout, test: &dyn PairedTest) -> Result<Vec<PathBuf>, ReportError> {
    let manifest = check_manifest(layout)?;
    let tables = build_tables(layout, test)?;
    let dir = layout.report();
    let mut written = Vec::new();
    let mut md = format!(
        "# Report\n\nConfig digest `{}`. Paired test: {}.\n\n",
        manifest.config_digest,
        test.name()
    );
    for t in &tables {
        let path = dir.join(t.file);
        write_atomic(&path, t.to_csv()?.as_bytes())?;
        written.push(path);
        if t.file != "pr_points.csv" {
            md.push_str(&t.to_markdown());
        }
    }
    let summary = dir.join("summary.md");
    write_atomic(&summary, md.as_bytes())?;
    written.push(summary);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn name_fields_split_from_the_right() {
        let p = Path::new("/x/com2sense.v2.story.literal.jsonl");
        assert_eq!(
            name_fields(p, ".jsonl", 3).unwrap(),
            ["com2sense.v2", "story", "literal"]
        );
        assert_eq!(name_fields(Path::new("csqa.jsonl"), ".jsonl", 1).unwrap(), ["csqa"]);
        assert!(name_fields(Path::new("csqa.jsonl"), ".jsonl", 2).is_none());
    }

    #[test]
    fn markdown_and_csv_share_rows() {
        let mut t = Table::new("t.csv", "T", &["a", "b"]);
        t.rows.push(vec!["1".into(), "x,y".into()]);
        assert_eq!(t.to_csv().unwrap(), "a,b\n1,\"x,y\"\n");
        assert!(t.to_markdown().contains("| 1 | x,y |"));
        assert!(Table::new("e.csv", "E", &["a"]).to_markdown().contains("No data."));
    }
}
