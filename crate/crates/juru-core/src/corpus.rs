//! Corpus ingestion and natural-language quality filtering.
//!
//! Documents arrive as plain-text files or JSONL records, get classified by
//! source category, and pass through a rule battery that rejects texts
//! unlikely to be predominantly natural language (tables, bullet dumps,
//! symbol soup). Statistics are pure functions of the text, so filtering is
//! idempotent and parallel-safe.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: String,
        source: std::io::Error,
    },
    #[error("ingest path does not exist: {0}")]
    MissingPath(String),
}

/// Source category of a document, mirroring the three corpus sections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocCategory {
    AcademicPaper,
    FederalRegulation,
    DecisionRuling,
}

impl DocCategory {
    pub const ALL: [DocCategory; 3] = [
        DocCategory::AcademicPaper,
        DocCategory::FederalRegulation,
        DocCategory::DecisionRuling,
    ];

    pub fn parse(name: &str) -> Option<DocCategory> {
        match name {
            "academic_paper" => Some(DocCategory::AcademicPaper),
            "federal_regulation" => Some(DocCategory::FederalRegulation),
            "decision_ruling" => Some(DocCategory::DecisionRuling),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DocCategory::AcademicPaper => "academic_paper",
            DocCategory::FederalRegulation => "federal_regulation",
            DocCategory::DecisionRuling => "decision_ruling",
        }
    }
}

impl fmt::Display for DocCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One source text with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub category: DocCategory,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_uri: Option<String>,
}

/// Per-rule statistics and the filter verdict for one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub doc_id: String,
    pub word_count: usize,
    pub mean_word_length: f64,
    pub alpha_word_fraction: f64,
    pub bullet_line_fraction: f64,
    pub ellipsis_line_fraction: f64,
    pub symbol_word_ratio: f64,
    pub stopword_hits: usize,
    pub passed: bool,
    pub failed_rules: Vec<String>,
}

/// Thresholds for the quality-rule battery.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub min_word_count: usize,
    pub max_word_count: usize,
    pub min_mean_word_length: f64,
    pub max_mean_word_length: f64,
    pub max_symbol_word_ratio: f64,
    pub max_bullet_line_fraction: f64,
    pub max_ellipsis_line_fraction: f64,
    pub min_alpha_word_fraction: f64,
    pub min_stopword_hits: usize,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds {
            min_word_count: 50,
            max_word_count: 100_000,
            min_mean_word_length: 3.0,
            max_mean_word_length: 10.0,
            max_symbol_word_ratio: 0.1,
            max_bullet_line_fraction: 0.9,
            max_ellipsis_line_fraction: 0.3,
            min_alpha_word_fraction: 0.8,
            min_stopword_hits: 2,
        }
    }
}

/// Portuguese stopword list used by the default pipeline.
pub const DEFAULT_STOPWORDS: [&str; 10] = [
    "de", "a", "que", "e", "do", "da", "em", "um", "para", "com",
];

const BULLET_GLYPHS: [char; 4] = ['\u{2022}', '\u{2023}', '-', '*'];

/// Per-category document and token counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub documents: BTreeMap<DocCategory, u64>,
    pub tokens: BTreeMap<DocCategory, u64>,
    pub total_documents: u64,
    pub total_tokens: u64,
}

/// A record skipped during ingestion, with the reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub location: String,
    pub reason: String,
}

/// Documents read from disk plus anything that had to be skipped.
#[derive(Debug, Clone, Default)]
pub struct IngestOutcome {
    pub documents: Vec<Document>,
    pub skipped: Vec<SkippedRecord>,
}

#[derive(Deserialize)]
struct JsonlRecord {
    id: String,
    #[serde(default)]
    category: Option<DocCategory>,
    text: String,
    #[serde(default)]
    source_uri: Option<String>,
}

/// Reads documents from `path`: a directory of `.txt`/`.jsonl` files or a
/// single such file. Plain-text files become one document each; JSONL files
/// contribute one document per line. Ids are deterministic (file name plus
/// record index), so re-ingestion of the same tree yields the same corpus.
pub fn ingest(path: &Path, category: DocCategory) -> Result<IngestOutcome, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::MissingPath(path.display().to_string()));
    }
    let mut files = Vec::new();
    if path.is_dir() {
        let entries = fs::read_dir(path).map_err(|source| CorpusError::Unreadable {
            path: path.display().to_string(),
            source,
        })?;
        for entry in entries {
            let entry = entry.map_err(|source| CorpusError::Unreadable {
                path: path.display().to_string(),
                source,
            })?;
            let p = entry.path();
            if p.is_file() {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }

    let mut outcome = IngestOutcome::default();
    for file in files {
        let name = file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| file.display().to_string());
        let bytes = fs::read(&file).map_err(|source| CorpusError::Unreadable {
            path: file.display().to_string(),
            source,
        })?;
        let is_jsonl = file
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("jsonl"));
        if is_jsonl {
            ingest_jsonl(&name, &bytes, category, &mut outcome);
        } else {
            match String::from_utf8(bytes) {
                Ok(text) => outcome.documents.push(Document {
                    id: format!("{name}#0"),
                    category,
                    text,
                    source_uri: None,
                }),
                Err(_) => outcome.skipped.push(SkippedRecord {
                    location: format!("{name}#0"),
                    reason: "invalid unicode".to_string(),
                }),
            }
        }
    }
    Ok(outcome)
}

fn ingest_jsonl(name: &str, bytes: &[u8], default: DocCategory, outcome: &mut IngestOutcome) {
    for (idx, raw_line) in bytes.split(|&b| b == b'\n').enumerate() {
        let location = format!("{name}#{idx}");
        if raw_line.iter().all(|b| b.is_ascii_whitespace()) {
            continue;
        }
        let line = match std::str::from_utf8(raw_line) {
            Ok(l) => l,
            Err(_) => {
                outcome.skipped.push(SkippedRecord {
                    location,
                    reason: "invalid unicode".to_string(),
                });
                continue;
            }
        };
        match serde_json::from_str::<JsonlRecord>(line) {
            Ok(rec) => outcome.documents.push(Document {
                id: format!("{location}:{}", rec.id),
                category: rec.category.unwrap_or(default),
                text: rec.text,
                source_uri: rec.source_uri,
            }),
            Err(err) => outcome.skipped.push(SkippedRecord {
                location,
                reason: format!("malformed record: {err}"),
            }),
        }
    }
}

/// Computes the full rule-battery statistics for one document. Degenerate
/// inputs produce failing reports rather than errors; an empty document has
/// word_count 0 and mean_word_length defined as 0.
pub fn compute_filter_report(
    doc: &Document,
    stopwords: &[String],
    thresholds: &FilterThresholds,
) -> FilterReport {
    let words: Vec<&str> = doc.text.split_whitespace().collect();
    let word_count = words.len();
    let lines: Vec<&str> = doc.text.lines().collect();
    let line_count = lines.len();

    let mean_word_length = if word_count == 0 {
        0.0
    } else {
        let total_chars: usize = words.iter().map(|w| w.chars().count()).sum();
        total_chars as f64 / word_count as f64
    };

    let alpha_word_fraction = if word_count == 0 {
        0.0
    } else {
        let alpha = words
            .iter()
            .filter(|w| w.chars().any(|c| c.is_alphabetic()))
            .count();
        alpha as f64 / word_count as f64
    };

    let bullet_line_fraction = if line_count == 0 {
        0.0
    } else {
        let bullets = lines
            .iter()
            .filter(|l| {
                l.trim_start()
                    .chars()
                    .next()
                    .is_some_and(|c| BULLET_GLYPHS.contains(&c))
            })
            .count();
        bullets as f64 / line_count as f64
    };

    let ellipsis_line_fraction = if line_count == 0 {
        0.0
    } else {
        let trailing = lines
            .iter()
            .filter(|l| {
                let t = l.trim_end();
                t.ends_with('\u{2026}') || t.ends_with("...")
            })
            .count();
        trailing as f64 / line_count as f64
    };

    let symbol_word_ratio = if word_count == 0 {
        0.0
    } else {
        let symbols = doc
            .text
            .chars()
            .filter(|&c| c == '#' || c == '\u{2026}')
            .count();
        symbols as f64 / word_count as f64
    };

    let stopword_hits = words
        .iter()
        .filter(|w| {
            let lowered = w.to_lowercase();
            stopwords.iter().any(|s| *s == lowered)
        })
        .count();

    let mut failed_rules = Vec::new();
    if word_count < thresholds.min_word_count {
        failed_rules.push("min_word_count".to_string());
    }
    if word_count > thresholds.max_word_count {
        failed_rules.push("max_word_count".to_string());
    }
    if mean_word_length < thresholds.min_mean_word_length {
        failed_rules.push("min_mean_word_length".to_string());
    }
    if mean_word_length > thresholds.max_mean_word_length {
        failed_rules.push("max_mean_word_length".to_string());
    }
    if symbol_word_ratio > thresholds.max_symbol_word_ratio {
        failed_rules.push("symbol_word_ratio".to_string());
    }
    if bullet_line_fraction > thresholds.max_bullet_line_fraction {
        failed_rules.push("bullet_line_fraction".to_string());
    }
    if ellipsis_line_fraction > thresholds.max_ellipsis_line_fraction {
        failed_rules.push("ellipsis_line_fraction".to_string());
    }
    if alpha_word_fraction < thresholds.min_alpha_word_fraction {
        failed_rules.push("alpha_word_fraction".to_string());
    }
    if stopword_hits < thresholds.min_stopword_hits {
        failed_rules.push("stopword_hits".to_string());
    }

    FilterReport {
        doc_id: doc.id.clone(),
        word_count,
        mean_word_length,
        alpha_word_fraction,
        bullet_line_fraction,
        ellipsis_line_fraction,
        symbol_word_ratio,
        stopword_hits,
        passed: failed_rules.is_empty(),
        failed_rules,
    }
}

/// Applies the rule battery to every document. Reports align one-to-one with
/// the input; `kept` preserves input order and contains exactly the documents
/// whose report passed.
pub fn filter_corpus(
    docs: &[Document],
    stopwords: &[String],
    thresholds: &FilterThresholds,
) -> (Vec<Document>, Vec<FilterReport>) {
    let reports: Vec<FilterReport> = docs
        .par_iter()
        .map(|d| compute_filter_report(d, stopwords, thresholds))
        .collect();
    let kept = docs
        .iter()
        .zip(&reports)
        .filter(|(_, r)| r.passed)
        .map(|(d, _)| d.clone())
        .collect();
    (kept, reports)
}

/// Builds the manifest from per-category document and token counts; totals
/// are exact integer sums.
pub fn manifest_summary(
    documents: &BTreeMap<DocCategory, u64>,
    tokens: &BTreeMap<DocCategory, u64>,
) -> CorpusManifest {
    CorpusManifest {
        documents: documents.clone(),
        tokens: tokens.clone(),
        total_documents: documents.values().sum(),
        total_tokens: tokens.values().sum(),
    }
}

pub fn default_stopwords() -> Vec<String> {
    DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect()
}
