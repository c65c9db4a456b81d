use std::path::{Path, PathBuf};

use storysense::artifacts::read_jsonl;
use storysense::qa::AnswerRecord;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn cli(run: &Path, args: &[&str]) -> i32 {
    let mock = fixtures().join("mock");
    let mut argv = vec![
        "storysense".to_string(),
        "--run".into(),
        run.display().to_string(),
        "--mock-dir".into(),
        mock.display().to_string(),
    ];
    argv.extend(args.iter().map(|s| s.to_string()));
    storysense::cli::dispatch(argv)
}

fn ingest(run: &Path) {
    let data = fixtures().join("datasets/csqa20.jsonl");
    assert_eq!(
        cli(run, &["ingest", "--input", data.to_str().unwrap(), "--dataset", "csqa"]),
        0
    );
}

#[test]
fn answer_on_mock_writes_records() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("r");
    ingest(&run);
    assert_eq!(cli(&run, &["answer", "--dataset", "csqa", "--condition", "base"]), 0);
    let rows: Vec<AnswerRecord> = read_jsonl(&run.join("artifacts/answers/csqa.base.jsonl")).unwrap();
    assert_eq!(rows.len(), 20);
    let glue = rows.iter().find(|r| r.question_id == "glue").unwrap();
    assert_eq!(glue.extracted_label.as_deref(), Some("A"));
    assert_eq!(glue.correct, Some(false));
}

#[test]
fn pr_without_expressions_names_missing_file() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("r");
    ingest(&run);
    assert_eq!(cli(&run, &["pr", "--dataset", "csqa", "--kind", "story"]), 1);
    let err = storysense::pipeline::Session::open(
        storysense::run::RunLayout::new(&run),
        storysense::run::Config {
            mock_dir: Some(fixtures().join("mock")),
            ..Default::default()
        },
    )
    .and_then(|mut s| storysense::pipeline::pr(&mut s, "csqa", storysense::prompting::ExpressionKind::Story))
    .unwrap_err();
    assert!(err.to_string().contains("expressions/csqa.story.jsonl"), "{err}");
}

#[test]
fn full_mock_pipeline_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("r");
    ingest(&run);
    for kind in ["story", "rule"] {
        assert_eq!(cli(&run, &["elicit", "--dataset", "csqa", "--kind", kind]), 0);
        assert_eq!(cli(&run, &["judge", "--dataset", "csqa", "--kind", kind]), 0);
    }
    for kind in ["story", "rule"] {
        assert_eq!(
            cli(
                &run,
                &[
                    "contextual-pr",
                    "--dataset",
                    "csqa",
                    "--kind",
                    kind,
                    "--mode",
                    "conditional"
                ]
            ),
            0
        );
        assert_eq!(cli(&run, &["pr", "--dataset", "csqa", "--kind", kind]), 0);
    }
    for c in ["base", "story", "rule", "both"] {
        assert_eq!(cli(&run, &["answer", "--dataset", "csqa", "--condition", c]), 0);
    }
    assert_eq!(cli(&run, &["score", "--dataset", "csqa"]), 0);
    assert_eq!(cli(&run, &["report"]), 0);
    let first = std::fs::read(run.join("report/summary.md")).unwrap();
    let accuracy = std::fs::read_to_string(run.join("report/accuracy.csv")).unwrap();
    assert!(accuracy.lines().count() >= 5, "{accuracy}");
    assert!(run.join("report/pr_summary.csv").exists());
    assert_eq!(cli(&run, &["report", "--test", "wilcoxon"]), 0);
    assert_eq!(cli(&run, &["report"]), 0);
    assert_eq!(std::fs::read(run.join("report/summary.md")).unwrap(), first);
}

#[test]
fn report_refuses_mixed_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("r");
    ingest(&run);
    assert_eq!(cli(&run, &["elicit", "--dataset", "csqa", "--kind", "story"]), 0);
    assert_eq!(cli(&run, &["answer", "--dataset", "csqa", "--condition", "base"]), 0);
    assert_eq!(
        cli(
            &run,
            &["answer", "--dataset", "csqa", "--condition", "story", "--seed", "9"]
        ),
        0
    );
    assert_eq!(cli(&run, &["report"]), 1);
    assert!(!run.join("report/summary.md").exists());
    assert_eq!(cli(&run, &["answer", "--dataset", "csqa", "--condition", "story"]), 0);
    assert_eq!(cli(&run, &["report"]), 0);
}

#[test]
fn report_detects_edited_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("r");
    ingest(&run);
    assert_eq!(cli(&run, &["answer", "--dataset", "csqa", "--condition", "base"]), 0);
    let path = run.join("artifacts/answers/csqa.base.jsonl");
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push('\n');
    std::fs::write(&path, text).unwrap();
    assert_eq!(cli(&run, &["report"]), 1);
}

#[test]
fn selfsft_cli_writes_states() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("r");
    let config = tmp.path().join("c.toml");
    std::fs::write(
        &config,
        "[selfsft]\nseen_datasets = [\"csqa\"]\nquestions_per_dataset = 3\ntrajectory_questions = 2\n",
    )
    .unwrap();
    ingest(&run);
    let cfg = config.to_str().unwrap();
    assert_eq!(cli(&run, &["--config", cfg, "selfsft", "naive"]), 0);
    assert_eq!(cli(&run, &["--config", cfg, "selfsft", "run", "--iterations", "2"]), 0);
    let out = run.join("artifacts/selfsft");
    assert!(out.join("state-1.json").exists() && out.join("state-2.json").exists());
    assert!(!out.join("state-3.json").exists());
    assert!(run.join("artifacts/selfsft-naive/state-1.json").exists());
}
