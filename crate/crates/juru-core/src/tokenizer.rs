//! Byte-pair-encoding tokenizer trained from scratch on the curated corpus.
//!
//! The base alphabet is the 256 byte values, so every unicode string encodes
//! without an unknown-token path and `decode(encode(s)) == s` holds
//! unconditionally. Two special tokens (pad, eos) sit directly above the byte
//! range and are never produced by merge rules. Training greedily merges the
//! highest-frequency adjacent pair, breaking frequency ties by the
//! lexicographically smallest pair of byte sequences, which makes the learned
//! model a deterministic function of the input document order.

use std::collections::{BTreeMap, HashMap};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DocCategory, Document};

/// Number of base byte tokens.
pub const BYTE_TOKENS: u32 = 256;
/// Token ids reserved below the first merge-produced id.
pub const RESERVED_TOKENS: u32 = 258;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocab_size {requested} too small: need more than {min}")]
    VocabTooSmall { requested: u32, min: u32 },
    #[error("cannot train a tokenizer on an empty corpus")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocab of size {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: u32 },
    #[error("malformed tokenizer model: {0}")]
    Malformed(String),
}

/// One learned merge rule: adjacent pair (left, right) becomes `result`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeRule {
    pub left: u32,
    pub right: u32,
    pub result: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub pad_id: u32,
    pub eos_id: u32,
}

/// Learned vocabulary, merge list, and special-token assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerModel {
    /// Byte sequence for every token id in [0, vocab_size); specials are empty.
    vocab: Vec<Vec<u8>>,
    merges: Vec<MergeRule>,
    special: SpecialTokens,
}

impl TokenizerModel {
    pub fn vocab_size(&self) -> u32 {
        self.vocab.len() as u32
    }

    pub fn pad_id(&self) -> u32 {
        self.special.pad_id
    }

    pub fn eos_id(&self) -> u32 {
        self.special.eos_id
    }

    pub fn special_tokens(&self) -> SpecialTokens {
        self.special
    }

    pub fn merges(&self) -> &[MergeRule] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.vocab.get(id as usize).map(|v| v.as_slice())
    }

    /// Builds a model directly from a merge list. The vocabulary is derived:
    /// 256 byte tokens, pad, eos, then one entry per rule.
    pub fn from_merges(merges: Vec<MergeRule>) -> Result<TokenizerModel, TokenizerError> {
        let mut vocab: Vec<Vec<u8>> = (0u32..BYTE_TOKENS).map(|b| vec![b as u8]).collect();
        vocab.push(Vec::new()); // pad
        vocab.push(Vec::new()); // eos
        for (i, rule) in merges.iter().enumerate() {
            let expect = RESERVED_TOKENS + i as u32;
            if rule.result != expect {
                return Err(TokenizerError::Malformed(format!(
                    "merge {i} produces id {} but {expect} expected",
                    rule.result
                )));
            }
            let left = vocab
                .get(rule.left as usize)
                .filter(|b| !b.is_empty())
                .ok_or_else(|| {
                    TokenizerError::Malformed(format!("merge {i} references bad id {}", rule.left))
                })?
                .clone();
            let right = vocab
                .get(rule.right as usize)
                .filter(|b| !b.is_empty())
                .ok_or_else(|| {
                    TokenizerError::Malformed(format!("merge {i} references bad id {}", rule.right))
                })?
                .clone();
            let mut joined = left;
            joined.extend_from_slice(&right);
            vocab.push(joined);
        }
        Ok(TokenizerModel {
            vocab,
            merges,
            special: SpecialTokens {
                pad_id: BYTE_TOKENS,
                eos_id: BYTE_TOKENS + 1,
            },
        })
    }

    /// Byte-level model with no merges (pure fallback vocabulary).
    pub fn byte_level() -> TokenizerModel {
        TokenizerModel::from_merges(Vec::new()).expect("empty merge list is valid")
    }

    pub fn to_json(&self) -> String {
        let mut vocab = BTreeMap::new();
        for (id, bytes) in self.vocab.iter().enumerate() {
            vocab.insert(id.to_string(), BASE64.encode(bytes));
        }
        let file = ModelFile {
            vocab,
            merges: self.merges.clone(),
            special_tokens: self.special,
            vocab_size: self.vocab_size(),
        };
        serde_json::to_string_pretty(&file).expect("tokenizer model serializes")
    }

    pub fn from_json(json: &str) -> Result<TokenizerModel, TokenizerError> {
        let file: ModelFile = serde_json::from_str(json)
            .map_err(|e| TokenizerError::Malformed(e.to_string()))?;
        let model = TokenizerModel::from_merges(file.merges)?;
        if model.vocab_size() != file.vocab_size {
            return Err(TokenizerError::Malformed(format!(
                "vocab_size field {} disagrees with derived vocabulary {}",
                file.vocab_size,
                model.vocab_size()
            )));
        }
        if model.special != file.special_tokens {
            return Err(TokenizerError::Malformed(
                "special token assignment disagrees with layout".to_string(),
            ));
        }
        for (key, b64) in &file.vocab {
            let id: usize = key
                .parse()
                .map_err(|_| TokenizerError::Malformed(format!("bad vocab key {key}")))?;
            let bytes = BASE64
                .decode(b64)
                .map_err(|e| TokenizerError::Malformed(format!("bad base64 for id {id}: {e}")))?;
            if model.vocab.get(id).map(|v| v.as_slice()) != Some(bytes.as_slice()) {
                return Err(TokenizerError::Malformed(format!(
                    "vocab entry {id} disagrees with merge-derived bytes"
                )));
            }
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    vocab: BTreeMap<String, String>,
    merges: Vec<MergeRule>,
    special_tokens: SpecialTokens,
    vocab_size: u32,
}

/// Trains a BPE model by greedy highest-frequency pair merging until the
/// vocabulary is full or no pair occurs at least twice.
pub fn train_bpe(docs: &[Document], vocab_size: u32) -> Result<TokenizerModel, TokenizerError> {
    if vocab_size <= RESERVED_TOKENS {
        return Err(TokenizerError::VocabTooSmall {
            requested: vocab_size,
            min: RESERVED_TOKENS,
        });
    }
    if docs.is_empty() || docs.iter().all(|d| d.text.is_empty()) {
        return Err(TokenizerError::EmptyCorpus);
    }

    let mut seqs: Vec<Vec<u32>> = docs
        .iter()
        .filter(|d| !d.text.is_empty())
        .map(|d| d.text.bytes().map(u32::from).collect())
        .collect();

    let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
    for seq in &seqs {
        for pair in seq.windows(2) {
            *counts.entry((pair[0], pair[1])).or_insert(0) += 1;
        }
    }

    let mut model = TokenizerModel::byte_level();
    while model.vocab_size() < vocab_size {
        let best = counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                // Highest count first; ties go to the lexicographically
                // smallest (left bytes, right bytes) pair, so `max` must see
                // the smaller pair as greater.
                ca.cmp(cb)
                    .then_with(|| pair_key(&model, **pb).cmp(&pair_key(&model, **pa)))
            })
            .map(|(p, _)| *p);
        let Some((left, right)) = best else {
            break;
        };
        let result = model.vocab_size();
        for seq in &mut seqs {
            merge_in_place(seq, left, right, result, &mut counts);
        }
        let mut joined = model.vocab[left as usize].clone();
        joined.extend_from_slice(&model.vocab[right as usize]);
        model.vocab.push(joined);
        model.merges.push(MergeRule {
            left,
            right,
            result,
        });
    }
    Ok(model)
}

fn pair_key(model: &TokenizerModel, pair: (u32, u32)) -> (Vec<u8>, Vec<u8>) {
    (
        model.vocab[pair.0 as usize].clone(),
        model.vocab[pair.1 as usize].clone(),
    )
}

/// Replaces left-to-right, non-overlapping occurrences of (left, right) with
/// `merged`, keeping the global pair counts consistent.
fn merge_in_place(
    seq: &mut Vec<u32>,
    left: u32,
    right: u32,
    merged: u32,
    counts: &mut HashMap<(u32, u32), i64>,
) {
    if seq.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == left && seq[i + 1] == right {
            if let Some(&prev) = out.last() {
                bump(counts, (prev, left), -1);
                bump(counts, (prev, merged), 1);
            }
            bump(counts, (left, right), -1);
            if i + 2 < seq.len() {
                let next = seq[i + 2];
                bump(counts, (right, next), -1);
                bump(counts, (merged, next), 1);
            }
            out.push(merged);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}

fn bump(counts: &mut HashMap<(u32, u32), i64>, pair: (u32, u32), delta: i64) {
    let entry = counts.entry(pair).or_insert(0);
    *entry += delta;
    debug_assert!(*entry >= 0, "pair count went negative for {pair:?}");
    if *entry == 0 {
        counts.remove(&pair);
    }
}

/// Encodes text by applying the merge rules in rule order over the byte
/// sequence. Internally merges the lowest-ranked pair present until none
/// applies, which produces the same result in fewer passes.
pub fn encode(model: &TokenizerModel, text: &str) -> Vec<u32> {
    let mut seq: Vec<u32> = text.bytes().map(u32::from).collect();
    if seq.len() < 2 || model.merges.is_empty() {
        return seq;
    }
    let rank: HashMap<(u32, u32), u32> = model
        .merges
        .iter()
        .map(|m| ((m.left, m.right), m.result))
        .collect();
    loop {
        let mut best: Option<(u32, u32, u32)> = None;
        for pair in seq.windows(2) {
            if let Some(&result) = rank.get(&(pair[0], pair[1])) {
                if best.is_none_or(|(_, _, r)| result < r) {
                    best = Some((pair[0], pair[1], result));
                }
            }
        }
        let Some((left, right, merged)) = best else {
            break;
        };
        let mut out = Vec::with_capacity(seq.len());
        let mut i = 0;
        while i < seq.len() {
            if i + 1 < seq.len() && seq[i] == left && seq[i + 1] == right {
                out.push(merged);
                i += 2;
            } else {
                out.push(seq[i]);
                i += 1;
            }
        }
        seq = out;
        if seq.len() < 2 {
            break;
        }
    }
    seq
}

/// Concatenates the byte sequences of `ids`; special tokens render as empty.
pub fn decode(model: &TokenizerModel, ids: &[u32]) -> Result<String, TokenizerError> {
    let mut bytes = Vec::new();
    for &id in ids {
        let entry = model
            .vocab
            .get(id as usize)
            .ok_or(TokenizerError::IdOutOfRange {
                id,
                vocab_size: model.vocab_size(),
            })?;
        bytes.extend_from_slice(entry);
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// Per-category document and encoded-token counts. No special tokens are
/// appended here; the packer adds eos and accounts for it separately.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CategoryCounts {
    pub documents: BTreeMap<DocCategory, u64>,
    pub tokens: BTreeMap<DocCategory, u64>,
}

impl CategoryCounts {
    pub fn total_tokens(&self) -> u64 {
        self.tokens.values().sum()
    }
}

pub fn count_tokens(model: &TokenizerModel, docs: &[Document]) -> CategoryCounts {
    let per_doc: Vec<(DocCategory, u64)> = docs
        .par_iter()
        .map(|d| (d.category, encode(model, &d.text).len() as u64))
        .collect();
    let mut counts = CategoryCounts::default();
    for (category, n) in per_doc {
        *counts.documents.entry(category).or_insert(0) += 1;
        *counts.tokens.entry(category).or_insert(0) += n;
    }
    counts
}
