//! Dataset ingestion into the unified question format, and seeded sampling.

mod formats;
mod record;

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::rng::SplitMix64;

pub use formats::{ArcSource, CopaSource, CsqaSource, FormatAdapter, FormatRegistry, UnifiedJsonl};
pub use record::{label_for_index, AnswerOption, DatasetManifest, QuestionRecord, MAX_OPTIONS};

#[cfg(test)]
pub(crate) use record::fixtures;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is empty")]
    EmptyFile { path: String },
    #[error("unknown format {0:?} (known: unified-jsonl, csqa-source, arc-source, copa-source)")]
    UnknownFormat(String),
    #[error("{path}:{line}: {reason}")]
    BadLine { path: String, line: usize, reason: String },
    #[error("question {question_id:?}: {reason}")]
    InvalidRecord { question_id: String, reason: String },
    #[error("cannot sample from an empty question list")]
    EmptyInput,
    #[error("sample size must be at least 1")]
    ZeroSample,
}

/// Reads a dataset file with the adapter registered under `format_id`.
///
/// `dataset_id` names the dataset for source formats; for `unified-jsonl`
/// each line carries its own id and the argument only labels the manifest
/// (pass `None` to take it from the first record).
pub fn load_dataset(
    path: &Path,
    format_id: &str,
    dataset_id: Option<&str>,
) -> Result<(Vec<QuestionRecord>, DatasetManifest), CorpusError> {
    load_dataset_with(&FormatRegistry::default(), path, format_id, dataset_id)
}

pub fn load_dataset_with(
    registry: &FormatRegistry,
    path: &Path,
    format_id: &str,
    dataset_id: Option<&str>,
) -> Result<(Vec<QuestionRecord>, DatasetManifest), CorpusError> {
    let path_str = path.display().to_string();
    let adapter = registry
        .get(format_id)
        .ok_or_else(|| CorpusError::UnknownFormat(format_id.to_string()))?;
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path_str.clone(),
        source,
    })?;
    if content.trim().is_empty() {
        return Err(CorpusError::EmptyFile { path: path_str });
    }
    let fallback_id = dataset_id
        .map(str::to_string)
        .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "dataset".to_string());

    let mut records = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| CorpusError::BadLine {
            path: path_str.clone(),
            line: line_no,
            reason,
        };
        let rec = adapter.parse_line(line, &fallback_id, line_no).map_err(bad)?;
        rec.validate().map_err(|e| bad(e.to_string()))?;
        records.push(rec);
    }

    let manifest_id = match dataset_id {
        Some(id) => id.to_string(),
        None => records.first().map(|r| r.dataset_id.clone()).unwrap_or(fallback_id),
    };
    let manifest = DatasetManifest::from_records(&manifest_id, &path_str, format_id, &records);
    Ok((records, manifest))
}

/// Serializes records as unified JSONL (one object per line, LF endings).
pub fn to_unified_jsonl(records: &[QuestionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_unified_jsonl(path: &Path, records: &[QuestionRecord]) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(to_unified_jsonl(records).as_bytes())
}

/// Picks `n` distinct questions with a seeded partial Fisher–Yates pass
/// (see [`crate::rng`]). When `n` covers the whole list, all records come
/// back in input order.
pub fn sample_questions(records: &[QuestionRecord], n: usize, seed: u64) -> Result<Vec<QuestionRecord>, CorpusError> {
    Ok(sample_indices(records.len(), n, seed)?
        .into_iter()
        .map(|i| records[i].clone())
        .collect())
}

/// Index form of [`sample_questions`].
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>, CorpusError> {
    if len == 0 {
        return Err(CorpusError::EmptyInput);
    }
    if n == 0 {
        return Err(CorpusError::ZeroSample);
    }
    if n >= len {
        return Ok((0..len).collect());
    }
    let mut idx: Vec<usize> = (0..len).collect();
    SplitMix64::new(seed).partial_shuffle(&mut idx, n);
    idx.truncate(n);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::fixtures::glue_stick;
    use super::*;
    use std::collections::HashSet;

    fn numbered(n: usize) -> Vec<QuestionRecord> {
        (0..n)
            .map(|i| {
                let mut q = glue_stick();
                q.question_id = format!("q{i}");
                q
            })
            .collect()
    }

    #[test]
    fn n_above_population_returns_all_in_order() {
        let recs = numbered(50);
        let s = sample_questions(&recs, 100, 1).unwrap();
        assert_eq!(s, recs);
    }

    #[test]
    fn sampling_is_seeded_and_distinct() {
        let recs = numbered(1221);
        let a = sample_questions(&recs, 100, 7).unwrap();
        let b = sample_questions(&recs, 100, 7).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(to_unified_jsonl(&a), to_unified_jsonl(&b));
        let ids: HashSet<_> = a.iter().map(|q| &q.question_id).collect();
        assert_eq!(ids.len(), 100);
        let c = sample_questions(&recs, 100, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sampling_errors() {
        assert!(matches!(sample_questions(&[], 3, 0), Err(CorpusError::EmptyInput)));
        assert!(matches!(
            sample_questions(&numbered(3), 0, 0),
            Err(CorpusError::ZeroSample)
        ));
    }
}
