use serde::Deserialize;
use storysense::corpus::AnswerOption;
use storysense::qa::extract_label;

#[derive(Deserialize)]
struct Case {
    id: String,
    options: Vec<AnswerOption>,
    raw: String,
    expected: Option<String>,
}

#[test]
fn hand_labelled_corpus_agrees() {
    let text =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/extraction/corpus.jsonl")).unwrap();
    let cases: Vec<Case> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(cases.len(), 50);
    let wrong: Vec<String> = cases
        .iter()
        .filter_map(|c| {
            let got = extract_label(&c.raw, &c.options);
            (got != c.expected).then(|| format!("{}: {:?} -> {:?}, expected {:?}", c.id, c.raw, got, c.expected))
        })
        .collect();
    assert!(wrong.is_empty(), "{wrong:#?}");
}
