//! Few-shot multiple-choice evaluation: exam ingestion with image-question
//! handling, one-shot prompt construction, likelihood-based answer selection,
//! accuracy aggregation, and specialization/forgetting curve assembly.

mod curves;
mod scoring;

pub use curves::{build_curves, CurvePoint, CurveReport, CurveSeries};
pub use scoring::{
    answer_question, evaluate_checkpoint, held_out_cross_entropy, AnswerRecord, CausalScorer,
    TransformerScorer,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad exam record {location}: {reason}")]
    BadRecord { location: String, reason: String },
    #[error("benchmark {0} has no exemplar entry")]
    MissingExemplar(String),
    #[error("duplicate tokens_seen {0} across checkpoint evals")]
    DuplicateTokens(u64),
    #[error("need at least one checkpoint eval")]
    NoEvals,
    #[error("checkpoint eval at {0} tokens has no law benchmarks")]
    MissingLawMean(u64),
}

/// One multiple-choice item with its answer key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamQuestion {
    pub id: String,
    pub benchmark: String,
    pub stem: String,
    pub options: Vec<String>,
    pub answer_index: usize,
    #[serde(default)]
    pub requires_image: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_caption: Option<String>,
    /// Character offset in the stem where the image would appear.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_position: Option<usize>,
}

impl ExamQuestion {
    fn validate(&self, location: &str) -> Result<(), EvalError> {
        if self.options.len() != 4 && self.options.len() != 5 {
            return Err(EvalError::BadRecord {
                location: location.to_string(),
                reason: format!("option count {} not in {{4, 5}}", self.options.len()),
            });
        }
        if self.answer_index >= self.options.len() {
            return Err(EvalError::BadRecord {
                location: location.to_string(),
                reason: format!(
                    "answer_index {} out of range for {} options",
                    self.answer_index,
                    self.options.len()
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkGroup {
    Law,
    General,
}

/// A named question set with its held-out one-shot exemplar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub name: String,
    pub group: BenchmarkGroup,
    pub questions: Vec<ExamQuestion>,
    pub exemplar: ExamQuestion,
    pub n_shots: usize,
}

/// Exemplar designation for one benchmark, loaded from the exemplars file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExemplarSpec {
    pub benchmark: String,
    pub group: BenchmarkGroup,
    pub exemplar: ExamQuestion,
}

/// Loads and validates questions from a JSONL file (one object per line).
pub fn load_exam(path: &Path) -> Result<Vec<ExamQuestion>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{name}:{}", i + 1);
        let q: ExamQuestion =
            serde_json::from_str(line).map_err(|e| EvalError::BadRecord {
                location: location.clone(),
                reason: e.to_string(),
            })?;
        q.validate(&location)?;
        out.push(q);
    }
    Ok(out)
}

/// Loads exemplar designations (JSON array of ExemplarSpec).
pub fn load_exemplars(path: &Path) -> Result<Vec<ExemplarSpec>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let specs: Vec<ExemplarSpec> =
        serde_json::from_str(&text).map_err(|e| EvalError::BadRecord {
            location: path.display().to_string(),
            reason: e.to_string(),
        })?;
    for spec in &specs {
        spec.exemplar
            .validate(&format!("exemplar for {}", spec.benchmark))?;
    }
    Ok(specs)
}

/// Image handling: questions that require an image and carry no caption are
/// dropped; captions are spliced into the stem at their character offset (or
/// appended when no offset is given) and the question is kept. Questions
/// with requires_image = false pass through untouched, which also makes the
/// operation idempotent.
pub fn preprocess_images(questions: Vec<ExamQuestion>) -> Vec<ExamQuestion> {
    questions
        .into_iter()
        .filter_map(|mut q| {
            if !q.requires_image {
                return Some(q);
            }
            let caption = q.image_caption.take()?;
            match q.caption_position {
                Some(offset) => {
                    let byte = q
                        .stem
                        .char_indices()
                        .nth(offset)
                        .map(|(b, _)| b)
                        .unwrap_or(q.stem.len());
                    q.stem.insert_str(byte, &caption);
                }
                None => {
                    q.stem.push(' ');
                    q.stem.push_str(&caption);
                }
            }
            q.requires_image = false;
            q.caption_position = None;
            Some(q)
        })
        .collect()
}

pub fn option_letter(index: usize) -> char {
    (b'A' + index as u8) as char
}

fn question_block(q: &ExamQuestion) -> String {
    let mut s = format!("Pergunta: {}\n", q.stem);
    for (i, opt) in q.options.iter().enumerate() {
        s.push_str(&format!("{}) {}\n", option_letter(i), opt));
    }
    s
}

/// Deterministic one-shot prompt: the benchmark's exemplar worked to its
/// keyed letter, then the target question ending in an open "Resposta:".
pub fn build_prompt(benchmark: &Benchmark, question: &ExamQuestion) -> String {
    let mut s = String::new();
    for _ in 0..benchmark.n_shots {
        s.push_str(&question_block(&benchmark.exemplar));
        s.push_str(&format!(
            "Resposta: {}\n\n",
            option_letter(benchmark.exemplar.answer_index)
        ));
    }
    s.push_str(&question_block(question));
    s.push_str("Resposta:");
    s
}

/// Groups loaded questions by their benchmark field and attaches exemplars.
/// A question with the exemplar's id is dropped so the exemplar never scores
/// itself. Questions whose benchmark has no exemplar entry are an error.
pub fn assemble_benchmarks(
    questions: Vec<ExamQuestion>,
    exemplars: &[ExemplarSpec],
) -> Result<Vec<Benchmark>, EvalError> {
    let mut by_name: BTreeMap<String, Vec<ExamQuestion>> = BTreeMap::new();
    for q in questions {
        by_name.entry(q.benchmark.clone()).or_default().push(q);
    }
    let mut benchmarks = Vec::new();
    for (name, qs) in by_name {
        let spec = exemplars
            .iter()
            .find(|e| e.benchmark == name)
            .ok_or_else(|| EvalError::MissingExemplar(name.clone()))?;
        let questions: Vec<ExamQuestion> = qs
            .into_iter()
            .filter(|q| q.id != spec.exemplar.id)
            .collect();
        benchmarks.push(Benchmark {
            name,
            group: spec.group,
            questions,
            exemplar: spec.exemplar.clone(),
            n_shots: 1,
        });
    }
    Ok(benchmarks)
}

/// Accuracy and counts for one benchmark at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkScore {
    pub name: String,
    pub group: BenchmarkGroup,
    pub evaluated: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Per-checkpoint accuracy record feeding the curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEval {
    pub checkpoint_id: String,
    pub tokens_seen: u64,
    pub benchmarks: Vec<BenchmarkScore>,
    /// Unweighted mean over law benchmarks; None when the group is empty.
    pub law_mean: Option<f64>,
    /// Unweighted mean over general-knowledge benchmarks.
    pub general_mean: Option<f64>,
    /// Benchmarks excluded because preprocessing emptied them.
    #[serde(default)]
    pub excluded: Vec<String>,
}

pub(crate) fn group_mean(scores: &[BenchmarkScore], group: BenchmarkGroup) -> Option<f64> {
    let accs: Vec<f64> = scores
        .iter()
        .filter(|s| s.group == group)
        .map(|s| s.accuracy)
        .collect();
    if accs.is_empty() {
        None
    } else {
        Some(accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    pub(crate) fn question(id: &str, benchmark: &str, n_options: usize, answer: usize) -> ExamQuestion {
        ExamQuestion {
            id: id.to_string(),
            benchmark: benchmark.to_string(),
            stem: format!("Enunciado da questão {id}"),
            options: (0..n_options).map(|i| format!("opção {i}")).collect(),
            answer_index: answer,
            requires_image: false,
            image_caption: None,
            caption_position: None,
        }
    }

    #[test]
    fn load_exam_validates_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oab.jsonl");
        let mut f = fs::File::create(&path).unwrap();
        for i in 0..160 {
            let q = question(&format!("q{i}"), "OAB-2023", 4, i % 4);
            writeln!(f, "{}", serde_json::to_string(&q).unwrap()).unwrap();
        }
        drop(f);
        let questions = load_exam(&path).unwrap();
        assert_eq!(questions.len(), 160);
    }

    #[test]
    fn load_exam_five_option_benchmark() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enade.jsonl");
        let mut f = fs::File::create(&path).unwrap();
        for i in 0..35 {
            let q = question(&format!("e{i}"), "ENADE-2022-Law", 5, i % 5);
            writeln!(f, "{}", serde_json::to_string(&q).unwrap()).unwrap();
        }
        drop(f);
        assert_eq!(load_exam(&path).unwrap().len(), 35);
    }

    #[test]
    fn out_of_range_answer_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let q = question("q0", "OAB-2023", 4, 5);
        fs::write(&path, serde_json::to_string(&q).unwrap()).unwrap();
        let err = load_exam(&path).unwrap_err();
        assert!(matches!(err, EvalError::BadRecord { .. }), "{err}");
    }

    #[test]
    fn three_option_question_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let q = question("q0", "OAB-2023", 3, 0);
        fs::write(&path, serde_json::to_string(&q).unwrap()).unwrap();
        assert!(load_exam(&path).is_err());
    }

    #[test]
    fn image_question_without_caption_is_dropped() {
        let mut q = question("q0", "B", 4, 0);
        q.requires_image = true;
        let out = preprocess_images(vec![q]);
        assert!(out.is_empty());
    }

    #[test]
    fn caption_is_spliced_at_character_offset() {
        let mut q = question("q0", "B", 4, 0);
        q.stem = "Observe o gráfico e responda.".to_string();
        q.requires_image = true;
        q.image_caption = Some("[Figura: gráfico de barras]".to_string());
        q.caption_position = Some(10);
        let out = preprocess_images(vec![q]);
        assert_eq!(out.len(), 1);
        let stem = &out[0].stem;
        let chars: Vec<char> = stem.chars().collect();
        let spliced: String = chars[10..10 + 27].iter().collect();
        assert_eq!(spliced, "[Figura: gráfico de barras]");
        assert!(!out[0].requires_image, "splice must clear the image flag");
        // Idempotence: a second pass changes nothing.
        let again = preprocess_images(out.clone());
        assert_eq!(again, out);
    }

    #[test]
    fn caption_without_offset_is_appended() {
        let mut q = question("q0", "B", 4, 0);
        q.requires_image = true;
        q.image_caption = Some("Legenda".to_string());
        let out = preprocess_images(vec![q]);
        assert!(out[0].stem.ends_with("Legenda"));
    }

    #[test]
    fn non_image_questions_pass_through_unchanged() {
        let q = question("q0", "B", 4, 0);
        let before = vec![q];
        let after = preprocess_images(before.clone());
        assert_eq!(after, before);
    }

    #[test]
    fn prompt_is_deterministic_and_lettered() {
        let exemplar = question("ex", "B", 4, 2);
        let bench = Benchmark {
            name: "B".to_string(),
            group: BenchmarkGroup::Law,
            questions: vec![],
            exemplar,
            n_shots: 1,
        };
        let q = question("q1", "B", 4, 0);
        let p1 = build_prompt(&bench, &q);
        let p2 = build_prompt(&bench, &q);
        assert_eq!(p1, p2);
        for letter in ["A)", "B)", "C)", "D)"] {
            assert_eq!(p1.matches(letter).count(), 2, "{letter} once per block");
        }
        assert!(!p1.contains("E)"));
        // The exemplar's keyed letter appears exactly once after "Resposta:".
        assert_eq!(p1.matches("Resposta: C").count(), 1);
        assert!(p1.ends_with("Resposta:"));
    }

    #[test]
    fn assemble_excludes_exemplar_from_scoring() {
        let questions = vec![
            question("q1", "B", 4, 0),
            question("ex", "B", 4, 1),
            question("q2", "B", 4, 2),
        ];
        let specs = vec![ExemplarSpec {
            benchmark: "B".to_string(),
            group: BenchmarkGroup::Law,
            exemplar: question("ex", "B", 4, 1),
        }];
        let benches = assemble_benchmarks(questions, &specs).unwrap();
        assert_eq!(benches.len(), 1);
        assert_eq!(benches[0].questions.len(), 2);
        assert!(benches[0].questions.iter().all(|q| q.id != "ex"));
    }

    #[test]
    fn missing_exemplar_is_an_error() {
        let questions = vec![question("q1", "B", 4, 0)];
        let err = assemble_benchmarks(questions, &[]).unwrap_err();
        assert!(matches!(err, EvalError::MissingExemplar(_)));
    }
}
