//! Desk-scale continued-pretraining laboratory: corpus curation, BPE
//! tokenization, sequence packing, causal-LM training with a non-factored
//! AdaFactor recipe, and few-shot multiple-choice evaluation with
//! specialization/forgetting curve tracking.

pub mod checkpoint;
pub mod corpus;
pub mod evaluator;
pub mod model;
pub mod packer;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use corpus::{Document, DocCategory};
pub use packer::{PackedSequence, TokenBatch};
pub use tokenizer::TokenizerModel;
