//! Likelihood-based answer selection against a read-only model snapshot.
//!
//! The primary mechanism scores each option by the log-probability of its
//! letter token immediately after the prompt. When a letter does not encode
//! to a single token, the question falls back to length-normalized
//! log-likelihood of the full option text, flagged in the output.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    build_prompt, group_mean, option_letter, preprocess_images, Benchmark, BenchmarkScore,
    CheckpointEval,
};
use crate::model::{forward, ModelConfig, ModelError, Parameters};
use crate::packer::{PackedSequence, TokenBatch};
use crate::tokenizer::{encode, TokenizerModel};

/// Read-only next-token scoring interface shared by the real transformer and
/// the synthetic test models.
pub trait CausalScorer: Sync {
    fn vocab_size(&self) -> usize;

    /// Log-softmax over the next token following `context`.
    fn next_token_logprobs(&self, context: &[u32]) -> Vec<f64>;

    /// Total log-probability of `continuation` following `context`.
    fn continuation_logprob(&self, context: &[u32], continuation: &[u32]) -> f64 {
        let mut ctx = context.to_vec();
        let mut total = 0.0;
        for &t in continuation {
            total += self.next_token_logprobs(&ctx)[t as usize];
            ctx.push(t);
        }
        total
    }
}

/// Per-question scoring outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub question_id: String,
    pub scores: Vec<f64>,
    pub chosen: usize,
    pub correct: bool,
    /// True when letter tokens were unavailable and option-text likelihood
    /// was used instead.
    pub used_fallback: bool,
}

fn argmax_lowest_index(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Scores one preprocessed question. Option i scores the letter token
/// " A"+i after the prompt; chosen is the argmax with ties to the lowest
/// index.
pub fn answer_question(
    scorer: &dyn CausalScorer,
    tokenizer: &TokenizerModel,
    benchmark: &Benchmark,
    question: &super::ExamQuestion,
) -> AnswerRecord {
    let prompt = build_prompt(benchmark, question);
    let prompt_ids = encode(tokenizer, &prompt);

    let letter_tokens: Vec<Option<u32>> = (0..question.options.len())
        .map(|i| {
            let ids = encode(tokenizer, &format!(" {}", option_letter(i)));
            if ids.len() == 1 {
                Some(ids[0])
            } else {
                None
            }
        })
        .collect();

    let (scores, used_fallback): (Vec<f64>, bool) = if letter_tokens.iter().all(Option::is_some) {
        let dist = scorer.next_token_logprobs(&prompt_ids);
        let scores = letter_tokens
            .iter()
            .map(|t| dist[t.unwrap() as usize])
            .collect();
        (scores, false)
    } else {
        let scores = question
            .options
            .iter()
            .map(|opt| {
                let ids = encode(tokenizer, &format!(" {opt}"));
                let n = ids.len().max(1);
                scorer.continuation_logprob(&prompt_ids, &ids) / n as f64
            })
            .collect();
        (scores, true)
    };

    let chosen = argmax_lowest_index(&scores);
    AnswerRecord {
        question_id: question.id.clone(),
        scores,
        chosen,
        correct: chosen == question.answer_index,
        used_fallback,
    }
}

/// Evaluates every benchmark against a snapshot. Benchmarks emptied by image
/// preprocessing are excluded and flagged. Group means are unweighted
/// averages over the benchmarks present in each group.
pub fn evaluate_checkpoint(
    scorer: &dyn CausalScorer,
    tokenizer: &TokenizerModel,
    benchmarks: &[Benchmark],
    checkpoint_id: &str,
    tokens_seen: u64,
) -> (CheckpointEval, Vec<AnswerRecord>) {
    let mut scores = Vec::new();
    let mut excluded = Vec::new();
    let mut records = Vec::new();
    for bench in benchmarks {
        let prepared = Benchmark {
            questions: preprocess_images(bench.questions.clone()),
            ..bench.clone()
        };
        if prepared.questions.is_empty() {
            excluded.push(bench.name.clone());
            continue;
        }
        let answers: Vec<AnswerRecord> = prepared
            .questions
            .par_iter()
            .map(|q| answer_question(scorer, tokenizer, &prepared, q))
            .collect();
        let correct = answers.iter().filter(|a| a.correct).count();
        let evaluated = answers.len();
        scores.push(BenchmarkScore {
            name: bench.name.clone(),
            group: bench.group,
            evaluated,
            correct,
            accuracy: correct as f64 / evaluated as f64,
        });
        records.extend(answers);
    }
    let law_mean = group_mean(&scores, super::BenchmarkGroup::Law);
    let general_mean = group_mean(&scores, super::BenchmarkGroup::General);
    (
        CheckpointEval {
            checkpoint_id: checkpoint_id.to_string(),
            tokens_seen,
            benchmarks: scores,
            law_mean,
            general_mean,
            excluded,
        },
        records,
    )
}

/// The trained transformer as a scorer. Contexts longer than the model's
/// window are truncated to their tail.
pub struct TransformerScorer<'a> {
    cfg: &'a ModelConfig,
    params: &'a Parameters,
    eos_id: u32,
}

impl<'a> TransformerScorer<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a Parameters, eos_id: u32) -> TransformerScorer<'a> {
        TransformerScorer {
            cfg,
            params,
            eos_id,
        }
    }

    fn logits_for(&self, ids: &[u32]) -> Result<(crate::tensor::Tensor, usize), ModelError> {
        let batch = TokenBatch {
            sequences: vec![PackedSequence {
                ids: ids.to_vec(),
                loss_mask: vec![true; ids.len()],
            }],
            step_index: 0,
        };
        let logits = forward(self.cfg, self.params, &batch)?;
        Ok((logits, ids.len()))
    }

    fn tail<'b>(&self, context: &'b [u32], room: usize) -> &'b [u32] {
        let keep = context.len().min(room);
        &context[context.len() - keep..]
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    row.iter().map(|&z| z - lse).collect()
}

impl CausalScorer for TransformerScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn next_token_logprobs(&self, context: &[u32]) -> Vec<f64> {
        let mut ids: Vec<u32> = Vec::new();
        if context.is_empty() {
            ids.push(self.eos_id);
        } else {
            ids.extend_from_slice(self.tail(context, self.cfg.max_seq_len));
        }
        let (logits, len) = self.logits_for(&ids).expect("forward over prompt");
        let v = self.cfg.vocab_size;
        log_softmax(&logits.data()[(len - 1) * v..len * v])
    }

    fn continuation_logprob(&self, context: &[u32], continuation: &[u32]) -> f64 {
        if continuation.is_empty() {
            return 0.0;
        }
        // One forward over context ++ continuation; read each continuation
        // token's log-probability at the position before it.
        let room = self.cfg.max_seq_len.saturating_sub(continuation.len());
        let mut ids: Vec<u32> = Vec::new();
        if context.is_empty() || room == 0 {
            ids.push(self.eos_id);
        } else {
            ids.extend_from_slice(self.tail(context, room));
        }
        let offset = ids.len();
        ids.extend_from_slice(continuation);
        ids.truncate(self.cfg.max_seq_len);
        let scored = ids.len() - offset; // continuation tokens inside the window
        let (logits, _) = self.logits_for(&ids).expect("forward over continuation");
        let v = self.cfg.vocab_size;
        let mut total = 0.0;
        for (i, &tok) in continuation.iter().take(scored).enumerate() {
            let pos = offset + i - 1;
            let row = log_softmax(&logits.data()[pos * v..(pos + 1) * v]);
            total += row[tok as usize];
        }
        total
    }
}

/// Mean next-token cross-entropy (nats) of a snapshot over held-out packed
/// sequences, weighted by included positions. Perplexity is exp of this.
pub fn held_out_cross_entropy(
    cfg: &ModelConfig,
    params: &Parameters,
    sequences: &[PackedSequence],
    batch_size: usize,
) -> Result<f64, ModelError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in sequences.chunks(batch_size.max(1)) {
        let batch = TokenBatch {
            sequences: chunk.to_vec(),
            step_index: 0,
        };
        let logits = forward(cfg, params, &batch)?;
        let v = cfg.vocab_size;
        let l = batch.seq_len();
        for (bi, seq) in batch.sequences.iter().enumerate() {
            for t in 0..l.saturating_sub(1) {
                if seq.loss_mask[t] && seq.loss_mask[t + 1] {
                    let row = &logits.data()[(bi * l + t) * v..(bi * l + t + 1) * v];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
                    sum += lse - row[seq.ids[t + 1] as usize];
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(ModelError::NoIncludedPositions);
    }
    Ok(sum / count as f64)
}
