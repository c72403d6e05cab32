//! Specialization/forgetting curve assembly from per-checkpoint evals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CheckpointEval, EvalError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tokens_seen: u64,
    pub law_mean: f64,
    pub general_mean: Option<f64>,
    pub per_benchmark: BTreeMap<String, f64>,
}

/// Checkpoint evals ordered by tokens_seen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub points: Vec<CurvePoint>,
}

impl CurveSeries {
    /// Columns: tokens_seen, law_mean, general_mean, then one column per
    /// benchmark in sorted name order. Missing cells stay empty.
    pub fn to_csv(&self) -> String {
        let mut names: Vec<String> = Vec::new();
        for p in &self.points {
            for name in p.per_benchmark.keys() {
                if !names.contains(name) {
                    names.push(name.clone());
                }
            }
        }
        names.sort();
        let mut out = String::from("tokens_seen,law_mean,general_mean");
        for name in &names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for p in &self.points {
            out.push_str(&p.tokens_seen.to_string());
            out.push(',');
            out.push_str(&format!("{:.6}", p.law_mean));
            out.push(',');
            if let Some(g) = p.general_mean {
                out.push_str(&format!("{g:.6}"));
            }
            for name in &names {
                out.push(',');
                if let Some(acc) = p.per_benchmark.get(name) {
                    out.push_str(&format!("{acc:.6}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// The curve series plus best-checkpoint and forgetting summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub series: CurveSeries,
    /// Checkpoint with the highest law mean (ties to the earliest).
    pub best_law_tokens: u64,
    pub best_law_mean: f64,
    /// Where the general-knowledge mean peaked, when the group exists.
    pub best_general_tokens: Option<u64>,
    pub best_general_mean: Option<f64>,
}

/// Sorts evals by tokens_seen and locates the best checkpoints. Duplicate
/// tokens_seen values are an error; every eval must carry a law mean.
pub fn build_curves(evals: &[CheckpointEval]) -> Result<CurveReport, EvalError> {
    if evals.is_empty() {
        return Err(EvalError::NoEvals);
    }
    let mut sorted: Vec<&CheckpointEval> = evals.iter().collect();
    sorted.sort_by_key(|e| e.tokens_seen);
    for pair in sorted.windows(2) {
        if pair[0].tokens_seen == pair[1].tokens_seen {
            return Err(EvalError::DuplicateTokens(pair[0].tokens_seen));
        }
    }
    let mut points = Vec::with_capacity(sorted.len());
    for eval in &sorted {
        let law_mean = eval
            .law_mean
            .ok_or(EvalError::MissingLawMean(eval.tokens_seen))?;
        points.push(CurvePoint {
            tokens_seen: eval.tokens_seen,
            law_mean,
            general_mean: eval.general_mean,
            per_benchmark: eval
                .benchmarks
                .iter()
                .map(|b| (b.name.clone(), b.accuracy))
                .collect(),
        });
    }

    let mut best_law = &points[0];
    for p in &points[1..] {
        if p.law_mean > best_law.law_mean {
            best_law = p;
        }
    }
    let (best_law_tokens, best_law_mean) = (best_law.tokens_seen, best_law.law_mean);

    let mut best_general: Option<(&CurvePoint, f64)> = None;
    for p in &points {
        if let Some(g) = p.general_mean {
            match best_general {
                Some((_, cur)) if g <= cur => {}
                _ => best_general = Some((p, g)),
            }
        }
    }

    Ok(CurveReport {
        best_law_tokens,
        best_law_mean,
        best_general_tokens: best_general.map(|(p, _)| p.tokens_seen),
        best_general_mean: best_general.map(|(_, g)| g),
        series: CurveSeries { points },
    })
}
