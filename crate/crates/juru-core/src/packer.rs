//! Divides tokenized documents into fixed-length training sequences and
//! streams shuffled batches with exact token/epoch accounting.
//!
//! Packing appends one eos per document and never crosses document
//! boundaries: the final chunk of each document is padded and masked rather
//! than spliced into the next document. The shard file is a flat binary
//! format (magic `JPK1`) holding the packed ids plus loss-mask bitmaps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const SHARD_MAGIC: [u8; 4] = *b"JPK1";
pub const SHARD_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PackError {
    #[error("sequence length must be at least 2, got {0}")]
    SeqLenTooSmall(usize),
    #[error("batch size must be at least 1")]
    BatchSizeZero,
    #[error("{have} sequences cannot fill a batch of {need} without repetition")]
    TooFewSequences { have: usize, need: usize },
    #[error("shard io failed for {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad shard magic in {0}")]
    BadMagic(String),
    #[error("unsupported shard version {version} in {path}")]
    BadVersion { path: String, version: u32 },
    #[error("shard {path} is truncated")]
    Truncated { path: String },
    #[error("sequence length mismatch: shard holds {shard}, expected {expected}")]
    SeqLenMismatch { shard: usize, expected: usize },
}

/// One fixed-length training sequence; mask is false exactly on padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl PackedSequence {
    pub fn seq_len(&self) -> usize {
        self.ids.len()
    }

    pub fn real_token_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// A batch of `B` packed sequences, carrying B x L token slots.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub sequences: Vec<PackedSequence>,
    pub step_index: u64,
}

impl TokenBatch {
    pub fn batch_size(&self) -> usize {
        self.sequences.len()
    }

    pub fn seq_len(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.seq_len())
    }

    pub fn token_slots(&self) -> u64 {
        self.batch_size() as u64 * self.seq_len() as u64
    }
}

/// Exact unique-vs-processed token arithmetic for a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochAccounting {
    pub unique_tokens: u64,
    pub steps: u64,
    pub tokens_processed: u64,
    pub epochs: f64,
}

/// tokens_processed = steps x B x L; epochs = tokens_processed / unique_tokens.
pub fn accounting(unique_tokens: u64, steps: u64, batch_size: u64, seq_len: u64) -> EpochAccounting {
    let tokens_processed = steps * batch_size * seq_len;
    let epochs = if unique_tokens == 0 {
        0.0
    } else {
        tokens_processed as f64 / unique_tokens as f64
    };
    EpochAccounting {
        unique_tokens,
        steps,
        tokens_processed,
        epochs,
    }
}

/// Appends eos to a document's token ids and splits the result into
/// ceil((n + 1) / L) chunks of exactly L tokens; the last chunk is padded
/// with `pad_id` and masked. Tokens never cross between documents.
pub fn pack_document(ids: &[u32], seq_len: usize, pad_id: u32, eos_id: u32) -> Vec<PackedSequence> {
    assert!(seq_len >= 2, "sequence length must be at least 2");
    let with_eos = ids.len() + 1;
    let chunks = with_eos.div_ceil(seq_len);
    let mut out = Vec::with_capacity(chunks);
    for c in 0..chunks {
        let start = c * seq_len;
        let end = ((c + 1) * seq_len).min(with_eos);
        let mut chunk_ids = Vec::with_capacity(seq_len);
        let mut mask = Vec::with_capacity(seq_len);
        for pos in start..end {
            let id = if pos < ids.len() { ids[pos] } else { eos_id };
            chunk_ids.push(id);
            mask.push(true);
        }
        while chunk_ids.len() < seq_len {
            chunk_ids.push(pad_id);
            mask.push(false);
        }
        out.push(PackedSequence {
            ids: chunk_ids,
            loss_mask: mask,
        });
    }
    out
}

/// Deterministic shuffled batch stream. Each epoch reshuffles with a fresh
/// ChaCha stream derived from the seed; partial trailing batches within an
/// epoch are dropped. With `repeat_to_fill`, corpora smaller than one batch
/// are cycled to fill exactly one batch per epoch.
#[derive(Debug)]
pub struct BatchStream {
    sequences: Vec<PackedSequence>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
    step: u64,
}

impl BatchStream {
    pub fn new(
        sequences: Vec<PackedSequence>,
        batch_size: usize,
        seed: u64,
        repeat_to_fill: bool,
    ) -> Result<BatchStream, PackError> {
        if batch_size == 0 {
            return Err(PackError::BatchSizeZero);
        }
        if sequences.len() < batch_size && !repeat_to_fill {
            return Err(PackError::TooFewSequences {
                have: sequences.len(),
                need: batch_size,
            });
        }
        if sequences.is_empty() {
            return Err(PackError::TooFewSequences {
                have: 0,
                need: batch_size,
            });
        }
        let mut stream = BatchStream {
            sequences,
            batch_size,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
            step: 0,
        };
        stream.reshuffle();
        Ok(stream)
    }

    pub fn batches_per_epoch(&self) -> usize {
        if self.sequences.len() < self.batch_size {
            1
        } else {
            self.sequences.len() / self.batch_size
        }
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        let mut order: Vec<usize> = (0..self.sequences.len()).collect();
        order.shuffle(&mut rng);
        if self.sequences.len() < self.batch_size {
            // repeat_to_fill: cycle the shuffled list until one batch fits.
            let base = order.clone();
            while order.len() < self.batch_size {
                order.extend_from_slice(&base);
            }
            order.truncate(self.batch_size);
        } else {
            order.truncate(self.batches_per_epoch() * self.batch_size);
        }
        self.order = order;
        self.cursor = 0;
    }
}

impl Iterator for BatchStream {
    type Item = TokenBatch;

    fn next(&mut self) -> Option<TokenBatch> {
        if self.cursor + self.batch_size > self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let picks = &self.order[self.cursor..self.cursor + self.batch_size];
        let batch = TokenBatch {
            sequences: picks.iter().map(|&i| self.sequences[i].clone()).collect(),
            step_index: self.step,
        };
        self.cursor += self.batch_size;
        self.step += 1;
        Some(batch)
    }
}

/// Writes sequences to a shard file: header {magic, version, L, count}, then
/// per record L little-endian u32 ids followed by a ceil(L/8)-byte loss-mask
/// bitmap (LSB-first within each byte).
pub fn write_shard(path: &Path, seq_len: usize, sequences: &[PackedSequence]) -> Result<(), PackError> {
    let io_err = |source| PackError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(&SHARD_MAGIC).map_err(io_err)?;
    w.write_all(&SHARD_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(seq_len as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(sequences.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    let mask_bytes = seq_len.div_ceil(8);
    for seq in sequences {
        assert_eq!(seq.ids.len(), seq_len, "sequence length mismatch in shard write");
        for &id in &seq.ids {
            w.write_all(&id.to_le_bytes()).map_err(io_err)?;
        }
        let mut bitmap = vec![0u8; mask_bytes];
        for (i, &m) in seq.loss_mask.iter().enumerate() {
            if m {
                bitmap[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&bitmap).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_shard(path: &Path) -> Result<(usize, Vec<PackedSequence>), PackError> {
    let io_err = |source| PackError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if magic != SHARD_MAGIC {
        return Err(PackError::BadMagic(path.display().to_string()));
    }
    let version = read_u32(&mut r, path)?;
    if version != SHARD_VERSION {
        return Err(PackError::BadVersion {
            path: path.display().to_string(),
            version,
        });
    }
    let seq_len = read_u32(&mut r, path)? as usize;
    let count = read_u32(&mut r, path)? as usize;
    let mask_bytes = seq_len.div_ceil(8);
    let mut sequences = Vec::with_capacity(count);
    let mut id_buf = vec![0u8; seq_len * 4];
    let mut bitmap = vec![0u8; mask_bytes];
    for _ in 0..count {
        read_exact(&mut r, &mut id_buf, path)?;
        let ids = id_buf
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        read_exact(&mut r, &mut bitmap, path)?;
        let loss_mask = (0..seq_len)
            .map(|i| bitmap[i / 8] >> (i % 8) & 1 == 1)
            .collect();
        sequences.push(PackedSequence { ids, loss_mask });
    }
    Ok((seq_len, sequences))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<(), PackError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            PackError::Truncated {
                path: path.display().to_string(),
            }
        } else {
            PackError::Io {
                path: path.display().to_string(),
                source: e,
            }
        }
    })
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32, PackError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    const PAD: u32 = 256;
    const EOS: u32 = 257;

    #[test]
    fn exact_boundary_fills_second_chunk() {
        // 8191 tokens + eos = 8192 = 2 x 4096, no padding anywhere.
        let ids: Vec<u32> = (0..8191).map(|i| i % 200).collect();
        let seqs = pack_document(&ids, 4096, PAD, EOS);
        assert_eq!(seqs.len(), 2);
        assert!(seqs.iter().all(|s| s.real_token_count() == 4096));
        assert_eq!(seqs[1].ids[4095], EOS);
    }

    #[test]
    fn empty_document_packs_to_lone_eos() {
        let seqs = pack_document(&[], 8, PAD, EOS);
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].ids[0], EOS);
        assert!(seqs[0].ids[1..].iter().all(|&id| id == PAD));
        assert_eq!(seqs[0].real_token_count(), 1);
    }

    #[test]
    fn eos_spills_into_its_own_chunk() {
        // n == L: the eos lands at position 0 of chunk 2.
        let ids: Vec<u32> = (0..4096).map(|i| i % 100).collect();
        let seqs = pack_document(&ids, 4096, PAD, EOS);
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[1].ids[0], EOS);
        assert_eq!(seqs[1].real_token_count(), 1);
    }

    #[test]
    fn token_conservation() {
        for n in [0usize, 1, 7, 8, 9, 63, 64, 100] {
            let ids: Vec<u32> = (0..n as u32).collect();
            let seqs = pack_document(&ids, 8, PAD, EOS);
            let real: usize = seqs.iter().map(|s| s.real_token_count()).sum();
            assert_eq!(real, n + 1, "n = {n}");
            // Mask is false exactly where ids == pad.
            for s in &seqs {
                for (id, m) in s.ids.iter().zip(&s.loss_mask) {
                    assert_eq!(*m, *id != PAD);
                }
            }
        }
    }

    fn dummy_sequences(n: usize) -> Vec<PackedSequence> {
        (0..n)
            .map(|i| PackedSequence {
                ids: vec![i as u32; 4],
                loss_mask: vec![true; 4],
            })
            .collect()
    }

    #[test]
    fn two_batches_per_epoch() {
        let stream = BatchStream::new(dummy_sequences(1024), 512, 7, false).unwrap();
        assert_eq!(stream.batches_per_epoch(), 2);
        let batches: Vec<TokenBatch> = stream.take(2).collect();
        assert_eq!(batches[0].batch_size(), 512);
        assert_eq!(batches[0].token_slots(), 512 * 4);
        // One epoch covers every sequence exactly once.
        let mut seen: Vec<u32> = batches
            .iter()
            .flat_map(|b| b.sequences.iter().map(|s| s.ids[0]))
            .collect();
        seen.sort_unstable();
        let want: Vec<u32> = (0..1024).collect();
        assert_eq!(seen, want);
    }

    #[test]
    fn same_seed_same_order() {
        let a: Vec<Vec<u32>> = BatchStream::new(dummy_sequences(20), 4, 99, false)
            .unwrap()
            .take(10)
            .map(|b| b.sequences.iter().map(|s| s.ids[0]).collect())
            .collect();
        let b: Vec<Vec<u32>> = BatchStream::new(dummy_sequences(20), 4, 99, false)
            .unwrap()
            .take(10)
            .map(|b| b.sequences.iter().map(|s| s.ids[0]).collect())
            .collect();
        assert_eq!(a, b);
        let c: Vec<Vec<u32>> = BatchStream::new(dummy_sequences(20), 4, 100, false)
            .unwrap()
            .take(10)
            .map(|b| b.sequences.iter().map(|s| s.ids[0]).collect())
            .collect();
        assert_ne!(a, c, "different seeds should reorder some batch");
    }

    #[test]
    fn epochs_reshuffle() {
        let orders: Vec<Vec<u32>> = BatchStream::new(dummy_sequences(64), 64, 3, false)
            .unwrap()
            .take(2)
            .map(|b| b.sequences.iter().map(|s| s.ids[0]).collect())
            .collect();
        assert_ne!(orders[0], orders[1], "epoch reshuffle should change order");
    }

    #[test]
    fn too_few_sequences_is_an_error() {
        let err = BatchStream::new(dummy_sequences(3), 8, 0, false).unwrap_err();
        assert!(matches!(
            err,
            PackError::TooFewSequences { have: 3, need: 8 }
        ));
        // With repetition allowed the stream fills one batch per epoch.
        let stream = BatchStream::new(dummy_sequences(3), 8, 0, true).unwrap();
        let batch = stream.take(1).next().unwrap();
        assert_eq!(batch.batch_size(), 8);
    }

    #[test]
    fn partial_batch_dropped() {
        let stream = BatchStream::new(dummy_sequences(10), 4, 5, false).unwrap();
        assert_eq!(stream.batches_per_epoch(), 2);
        // Within each epoch, exactly 8 of 10 sequences appear.
        let batches: Vec<TokenBatch> = stream.take(2).collect();
        let seen: usize = batches.iter().map(|b| b.batch_size()).sum();
        assert_eq!(seen, 8);
    }

    #[test]
    fn paper_scale_accounting() {
        let acc = accounting(1_999_721_118, 2800, 512, 4096);
        assert_eq!(acc.tokens_processed, 5_872_025_600);
        assert!((acc.epochs - 2.936).abs() < 1e-3);
        let best = accounting(1_999_721_118, 1800, 512, 4096);
        assert_eq!(best.tokens_processed, 3_774_873_600);
        let zero = accounting(1_999_721_118, 0, 512, 4096);
        assert_eq!(zero.tokens_processed, 0);
        assert_eq!(zero.epochs, 0.0);
    }

    #[test]
    fn shard_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jpk");
        let mut seqs = Vec::new();
        for n in [0usize, 3, 9, 10] {
            let ids: Vec<u32> = (0..n as u32).collect();
            seqs.extend(pack_document(&ids, 10, PAD, EOS));
        }
        write_shard(&path, 10, &seqs).unwrap();
        let (seq_len, back) = read_shard(&path).unwrap();
        assert_eq!(seq_len, 10);
        assert_eq!(back, seqs);
    }

    #[test]
    fn shard_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jpk");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(read_shard(&path), Err(PackError::BadMagic(_))));
    }
}
