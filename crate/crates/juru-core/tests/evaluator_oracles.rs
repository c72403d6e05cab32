//! Evaluation-harness oracles: a scorer that knows the answer key must score
//! 1.0, its adversarial inverse must score 0.0, and a random scorer must sit
//! at the 1-in-4 baseline. Plus consistency checks of the transformer-backed
//! scorer against the trait's default continuation scoring.

mod support;

use juru_core::evaluator::{
    evaluate_checkpoint, Benchmark, BenchmarkGroup, CausalScorer, ExamQuestion, TransformerScorer,
};
use juru_core::model::{ModelConfig, Parameters, PositionScheme};
use juru_core::tokenizer::encode;
use support::{letter_tokenizer, KeyedScorer, RandomScorer};

fn fixture_question(id: usize, benchmark: &str, n_options: usize, key: usize) -> ExamQuestion {
    ExamQuestion {
        id: format!("{benchmark}-{id}"),
        benchmark: benchmark.to_string(),
        stem: format!("Questão número {id} do benchmark {benchmark} sobre direito"),
        options: (0..n_options).map(|i| format!("alternativa {i}")).collect(),
        answer_index: key,
        requires_image: false,
        image_caption: None,
        caption_position: None,
    }
}

fn fixture_benchmark(name: &str, group: BenchmarkGroup, n: usize, n_options: usize) -> Benchmark {
    let questions: Vec<ExamQuestion> = (0..n)
        .map(|i| fixture_question(i, name, n_options, (i * 13 + 1) % n_options))
        .collect();
    Benchmark {
        name: name.to_string(),
        group,
        questions,
        exemplar: fixture_question(9999, name, n_options, 0),
        n_shots: 1,
    }
}

fn keys_of(benches: &[Benchmark]) -> Vec<(String, usize)> {
    benches
        .iter()
        .flat_map(|b| {
            b.questions
                .iter()
                .map(|q| (q.stem.clone(), q.answer_index))
                .chain(std::iter::once((
                    b.exemplar.stem.clone(),
                    b.exemplar.answer_index,
                )))
        })
        .collect()
}

#[test]
fn oracle_scores_exactly_one() {
    let tok = letter_tokenizer();
    let benches = vec![
        fixture_benchmark("OAB-fixture", BenchmarkGroup::Law, 40, 4),
        fixture_benchmark("ENADE-fixture", BenchmarkGroup::Law, 20, 5),
    ];
    let oracle = KeyedScorer::oracle(letter_tokenizer(), keys_of(&benches));
    let (eval, records) = evaluate_checkpoint(&oracle, &tok, &benches, "oracle", 0);
    assert_eq!(eval.law_mean, Some(1.0));
    assert!(records.iter().all(|r| r.correct));
    assert!(records.iter().all(|r| !r.used_fallback));
}

#[test]
fn anti_oracle_scores_exactly_zero() {
    let tok = letter_tokenizer();
    let benches = vec![fixture_benchmark("OAB-fixture", BenchmarkGroup::Law, 40, 4)];
    let anti = KeyedScorer::anti_oracle(letter_tokenizer(), keys_of(&benches));
    let (eval, records) = evaluate_checkpoint(&anti, &tok, &benches, "anti", 0);
    assert_eq!(eval.law_mean, Some(0.0));
    assert!(records.iter().all(|r| !r.correct));
}

#[test]
fn random_scorer_sits_at_the_quarter_baseline() {
    let tok = letter_tokenizer();
    let benches = vec![fixture_benchmark(
        "random-fixture",
        BenchmarkGroup::Law,
        1000,
        4,
    )];
    let random = RandomScorer {
        vocab: tok.vocab_size() as usize,
        seed: 20240131,
    };
    let (eval, _) = evaluate_checkpoint(&random, &tok, &benches, "rnd", 0);
    let acc = eval.law_mean.unwrap();
    // 3-sigma binomial band around 0.25 for n = 1000.
    assert!(
        (acc - 0.25).abs() <= 0.04,
        "random accuracy {acc} outside 0.25 +/- 0.04"
    );
}

#[test]
fn transformer_scorer_distributions_are_normalized() {
    let cfg = ModelConfig {
        vocab_size: 264,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 32,
        positions: PositionScheme::Rotary,
    };
    let params = Parameters::init(&cfg, 8);
    let scorer = TransformerScorer::new(&cfg, &params, 257);
    let tok = letter_tokenizer();
    let ctx = encode(&tok, "Pergunta: algo\nResposta:");
    let dist = scorer.next_token_logprobs(&ctx);
    assert_eq!(dist.len(), 264);
    let total: f64 = dist.iter().map(|lp| lp.exp()).sum();
    assert!((total - 1.0).abs() < 1e-9, "probabilities sum to {total}");
}

#[test]
fn transformer_continuation_matches_default_scoring() {
    // The single-forward override must agree with the trait's default
    // one-token-at-a-time scoring; causal masking makes them the same math.
    struct DefaultOnly<'a>(TransformerScorer<'a>);
    impl CausalScorer for DefaultOnly<'_> {
        fn vocab_size(&self) -> usize {
            self.0.vocab_size()
        }
        fn next_token_logprobs(&self, context: &[u32]) -> Vec<f64> {
            self.0.next_token_logprobs(context)
        }
        // No continuation_logprob override: uses the default loop.
    }

    let cfg = ModelConfig {
        vocab_size: 264,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 64,
        positions: PositionScheme::Rotary,
    };
    let params = Parameters::init(&cfg, 21);
    let fast = TransformerScorer::new(&cfg, &params, 257);
    let slow = DefaultOnly(TransformerScorer::new(&cfg, &params, 257));

    let tok = letter_tokenizer();
    let ctx = encode(&tok, "Pergunta: qual?\nResposta:");
    let cont = encode(&tok, " alternativa dois");
    let a = fast.continuation_logprob(&ctx, &cont);
    let b = slow.continuation_logprob(&ctx, &cont);
    assert!((a - b).abs() < 1e-10, "fast {a} vs default {b}");
}

#[test]
fn transformer_scorer_truncates_long_contexts() {
    let cfg = ModelConfig {
        vocab_size: 264,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 16,
        positions: PositionScheme::Rotary,
    };
    let params = Parameters::init(&cfg, 2);
    let scorer = TransformerScorer::new(&cfg, &params, 257);
    let long_ctx: Vec<u32> = (0..200u32).map(|i| i % 250).collect();
    let dist = scorer.next_token_logprobs(&long_ctx);
    assert_eq!(dist.len(), 264);
    assert!(dist.iter().all(|lp| lp.is_finite()));
}
