//! Shared helpers for integration tests: toy configurations, finite
//! difference machinery, and independent reference implementations that act
//! as oracles for the production code paths.

#![allow(dead_code)] // each test target uses a different subset

use juru_core::corpus::{DocCategory, Document};
use juru_core::evaluator::CausalScorer;
use juru_core::model::{backward, forward, loss, ModelConfig, Parameters, PositionScheme};
use juru_core::packer::{PackedSequence, TokenBatch};
use juru_core::tokenizer::{decode, encode, MergeRule, TokenizerModel};
use juru_core::trainer::{adafactor_step, OptimizerConfig, TrainState, WeightDecayMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const Z_COEFF: f64 = 1e-4;

pub fn toy_config(positions: PositionScheme) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 8,
        positions,
    }
}

pub fn toy_batch() -> TokenBatch {
    TokenBatch {
        sequences: vec![
            PackedSequence {
                ids: vec![1, 4, 2, 7, 3, 10],
                loss_mask: vec![true; 6],
            },
            PackedSequence {
                ids: vec![5, 5, 8, 9, 0, 0],
                loss_mask: vec![true, true, true, true, false, false],
            },
        ],
        step_index: 0,
    }
}

/// Central finite differences over every scalar of every parameter tensor.
/// Returns the worst relative error seen and the tensor it occurred in.
pub fn max_gradient_error(
    cfg: &ModelConfig,
    params: &Parameters,
    batch: &TokenBatch,
    h: f64,
) -> (f64, String) {
    let (_, grads) = backward(cfg, params, batch, Z_COEFF).expect("backward");
    let grad_list: Vec<(String, Vec<f64>)> = grads
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.data().to_vec()))
        .collect();

    let mut worst = 0.0f64;
    let mut worst_tensor = String::new();
    for (ti, (name, analytic)) in grad_list.iter().enumerate() {
        for i in 0..analytic.len() {
            let numeric = {
                let mut plus = params.clone();
                plus.named_mut()[ti].1.data_mut()[i] += h;
                let lp = total_loss(cfg, &plus, batch);
                let mut minus = params.clone();
                minus.named_mut()[ti].1.data_mut()[i] -= h;
                let lm = total_loss(cfg, &minus, batch);
                (lp - lm) / (2.0 * h)
            };
            let a = analytic[i];
            // Central differences at h = 1e-5 carry ~1e-10 of absolute
            // cancellation noise, so gradients below the 1e-4 floor are
            // compared absolutely (against 1e-8 at the target tolerance)
            // rather than relatively.
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            if rel > worst {
                worst = rel;
                worst_tensor = format!("{name}[{i}]");
            }
        }
    }
    (worst, worst_tensor)
}

pub fn total_loss(cfg: &ModelConfig, params: &Parameters, batch: &TokenBatch) -> f64 {
    let logits = forward(cfg, params, batch).expect("forward");
    loss(&logits, batch, Z_COEFF).expect("loss").total
}

/// Tokenizer whose " A".." E" byte pairs are single merged tokens, so the
/// letter-token scoring path is exercised without training a model.
pub fn letter_tokenizer() -> TokenizerModel {
    let merges = (0..5)
        .map(|i| MergeRule {
            left: 32,
            right: u32::from(b'A') + i,
            result: 258 + i,
        })
        .collect();
    TokenizerModel::from_merges(merges).expect("letter merges are valid")
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Synthetic scorer that recognizes which fixture question a prompt ends
/// with (by its stem) and shifts probability mass onto the keyed letter
/// token: up for the oracle, down for the anti-oracle.
pub struct KeyedScorer {
    tokenizer: TokenizerModel,
    /// (stem, keyed option index) for every fixture question.
    keys: Vec<(String, usize)>,
    pub boost: f64,
}

impl KeyedScorer {
    pub fn oracle(tokenizer: TokenizerModel, keys: Vec<(String, usize)>) -> KeyedScorer {
        KeyedScorer {
            tokenizer,
            keys,
            boost: 8.0,
        }
    }

    pub fn anti_oracle(tokenizer: TokenizerModel, keys: Vec<(String, usize)>) -> KeyedScorer {
        KeyedScorer {
            tokenizer,
            keys,
            boost: -8.0,
        }
    }
}

impl CausalScorer for KeyedScorer {
    fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size() as usize
    }

    fn next_token_logprobs(&self, context: &[u32]) -> Vec<f64> {
        let text = decode(&self.tokenizer, context).expect("decodable context");
        // The target question is the one whose stem appears last.
        let target = self
            .keys
            .iter()
            .filter_map(|(stem, idx)| text.rfind(stem).map(|pos| (pos, *idx)))
            .max_by_key(|(pos, _)| *pos)
            .map(|(_, idx)| idx);
        let mut logits = vec![0.0; self.vocab_size()];
        if let Some(idx) = target {
            let letter = (b'A' + idx as u8) as char;
            let ids = encode(&self.tokenizer, &format!(" {letter}"));
            assert_eq!(ids.len(), 1, "fixture tokenizer must merge letters");
            logits[ids[0] as usize] = self.boost;
        }
        log_softmax(&logits)
    }
}

/// Deterministic pseudo-random scorer: the context hashes to a seed, the
/// seed draws one uniform logit vector. No two options ever tie.
pub struct RandomScorer {
    pub vocab: usize,
    pub seed: u64,
}

impl CausalScorer for RandomScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_token_logprobs(&self, context: &[u32]) -> Vec<f64> {
        let mut h = self.seed;
        for &t in context {
            h = h.wrapping_mul(0x100000001b3).wrapping_add(u64::from(t));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let logits: Vec<f64> = (0..self.vocab).map(|_| rng.random::<f64>() * 4.0).collect();
        log_softmax(&logits)
    }
}

/// Reference optimizer over one flat parameter vector, written separately
/// from the production code: different state layout, different formula
/// spellings. The dual-implementation oracle for the update rule.
pub struct FlatAdafactor {
    pub k: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    beta1: f64,
    peak_lr: f64,
    warmup: f64,
    eps: f64,
    decay_by_lr_squared: bool,
}

impl FlatAdafactor {
    pub fn new(n: usize, cfg: &OptimizerConfig) -> FlatAdafactor {
        FlatAdafactor {
            k: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            beta1: cfg.beta1,
            peak_lr: cfg.peak_lr,
            warmup: cfg.warmup_steps as f64,
            eps: cfg.epsilon,
            decay_by_lr_squared: cfg.weight_decay == WeightDecayMode::LrSquared,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.k += 1;
        let kf = self.k as f64;
        let beta2 = 1.0 - 1.0 / kf.powf(0.8);
        let lr = if kf < self.warmup {
            self.peak_lr * kf / self.warmup
        } else {
            self.peak_lr
        };
        for i in 0..theta.len() {
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i].powi(2);
            let u = grad[i] / (self.v[i].sqrt() + self.eps);
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * u;
            theta[i] -= lr * self.m[i];
            if self.decay_by_lr_squared {
                theta[i] *= 1.0 - lr * lr;
            }
        }
    }
}

pub fn flatten_params(params: &Parameters) -> Vec<f64> {
    params
        .named()
        .iter()
        .flat_map(|(_, t)| t.data().iter().copied())
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Drives the production optimizer and the flat reference with identical
/// random gradients; returns the worst divergence across parameters and both
/// moments over the whole run.
pub fn optimizer_divergence(steps: usize, opt: &OptimizerConfig, seed: u64) -> f64 {
    let cfg = toy_config(PositionScheme::Rotary);
    let init = Parameters::init(&cfg, seed);
    let mut state = TrainState::new(init.clone());
    let mut flat_theta = flatten_params(&init);
    let mut reference = FlatAdafactor::new(flat_theta.len(), opt);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let mut worst = 0.0f64;
    for _ in 0..steps {
        let mut grads = init.zeros_like();
        let mut flat_grad = Vec::with_capacity(flat_theta.len());
        for (_, t) in grads.named_mut() {
            for g in t.data_mut() {
                *g = rng.random::<f64>() * 2.0 - 1.0;
                flat_grad.push(*g);
            }
        }
        adafactor_step(&mut state, &grads, opt).unwrap();
        reference.step(&mut flat_theta, &flat_grad);

        worst = worst.max(max_abs_diff(&flatten_params(&state.params), &flat_theta));
        worst = worst.max(max_abs_diff(
            &flatten_params(&state.opt.first_moment),
            &reference.m,
        ));
        worst = worst.max(max_abs_diff(
            &flatten_params(&state.opt.second_moment),
            &reference.v,
        ));
    }
    worst
}

const DOMAIN_LAW: [&str; 10] = [
    "tribunal", "lei", "processo", "direito", "recurso", "sentença", "federal", "justiça",
    "código", "artigo",
];
const DOMAIN_SKY: [&str; 10] = [
    "estrela", "galáxia", "planeta", "órbita", "cometa", "telescópio", "luz", "gravidade",
    "nebulosa", "eclipse",
];

/// Seeded synthetic documents over one of two disjoint word sets; the raw
/// material for the specialization/forgetting experiment.
pub fn synthetic_domain_docs(domain_sky: bool, count: usize, seed: u64) -> Vec<Document> {
    let words: &[&str] = if domain_sky { &DOMAIN_SKY } else { &DOMAIN_LAW };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let len = 30 + rng.random_range(0..40);
            let text: Vec<&str> = (0..len)
                .map(|_| words[rng.random_range(0..words.len())])
                .collect();
            Document {
                id: format!("{}-{i}", if domain_sky { "sky" } else { "law" }),
                category: DocCategory::AcademicPaper,
                text: text.join(" "),
                source_uri: None,
            }
        })
        .collect()
}
