//! Small decoder-only causal transformer with hand-written forward and
//! backward passes in f64.
//!
//! Architecture: pre-norm blocks (RMSNorm), rotary or learned positions,
//! GeLU MLP, untied output projection, no biases. The training loss is mean
//! next-token cross-entropy over unmasked positions plus an auxiliary z-loss
//! that penalizes the squared log-normalizer of the softmax, averaged over
//! the same positions.
//!
//! Everything is deterministic: parallelism only splits work whose
//! floating-point reduction order is fixed (rows of matrix products, batch
//! elements), so repeated runs produce bit-identical logits and gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::packer::TokenBatch;
use crate::tensor::{matmul, matmul_at_acc, matmul_bt_acc, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token id {id} out of range for vocab {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("loss has no included positions (all targets masked)")]
    NoIncludedPositions,
    #[error("non-finite values in tensor {0}")]
    NonFinite(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionScheme {
    Rotary,
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub positions: PositionScheme,
}

impl ModelConfig {
    /// Desk-scale default: 4 layers of width 256 with rotary positions.
    pub fn desk_default(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: 256,
            n_layers: 4,
            n_heads: 4,
            d_ff: 1024,
            max_seq_len: 256,
            positions: PositionScheme::Rotary,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(ModelError::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.positions == PositionScheme::Rotary && self.head_dim() % 2 != 0 {
            return Err(ModelError::Config(format!(
                "rotary positions need an even head dim, got {}",
                self.head_dim()
            )));
        }
        if self.vocab_size == 0 {
            return Err(ModelError::Config("vocab_size must be positive".into()));
        }
        if self.max_seq_len == 0 {
            return Err(ModelError::Config("max_seq_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

/// Named parameter tensors for the full model. Gradients and optimizer
/// moments reuse this structure, so every traversal below must visit all
/// tensors in the same fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub tok_embed: Tensor,
    pub pos_embed: Option<Tensor>,
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
    pub out_proj: Tensor,
}

const INIT_STD: f64 = 0.02;

impl Parameters {
    /// Seeded Gaussian init (std 0.02) for projections, ones for norms.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Parameters {
        let d = cfg.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tok_embed = Tensor::randn(&[cfg.vocab_size, d], INIT_STD, &mut rng);
        let pos_embed = match cfg.positions {
            PositionScheme::Learned => {
                Some(Tensor::randn(&[cfg.max_seq_len, d], INIT_STD, &mut rng))
            }
            PositionScheme::Rotary => None,
        };
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                attn_norm: Tensor::from_vec(&[d], vec![1.0; d]),
                wq: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                wk: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                wv: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                wo: Tensor::randn(&[d, d], INIT_STD, &mut rng),
                mlp_norm: Tensor::from_vec(&[d], vec![1.0; d]),
                w_up: Tensor::randn(&[d, cfg.d_ff], INIT_STD, &mut rng),
                w_down: Tensor::randn(&[cfg.d_ff, d], INIT_STD, &mut rng),
            })
            .collect();
        Parameters {
            tok_embed,
            pos_embed,
            layers,
            final_norm: Tensor::from_vec(&[d], vec![1.0; d]),
            out_proj: Tensor::randn(&[d, cfg.vocab_size], INIT_STD, &mut rng),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Parameters {
        let d = cfg.d_model;
        Parameters {
            tok_embed: Tensor::zeros(&[cfg.vocab_size, d]),
            pos_embed: match cfg.positions {
                PositionScheme::Learned => Some(Tensor::zeros(&[cfg.max_seq_len, d])),
                PositionScheme::Rotary => None,
            },
            layers: (0..cfg.n_layers)
                .map(|_| LayerParams {
                    attn_norm: Tensor::zeros(&[d]),
                    wq: Tensor::zeros(&[d, d]),
                    wk: Tensor::zeros(&[d, d]),
                    wv: Tensor::zeros(&[d, d]),
                    wo: Tensor::zeros(&[d, d]),
                    mlp_norm: Tensor::zeros(&[d]),
                    w_up: Tensor::zeros(&[d, cfg.d_ff]),
                    w_down: Tensor::zeros(&[cfg.d_ff, d]),
                })
                .collect(),
            final_norm: Tensor::zeros(&[d]),
            out_proj: Tensor::zeros(&[d, cfg.vocab_size]),
        }
    }

    pub fn zeros_like(&self) -> Parameters {
        Parameters {
            tok_embed: self.tok_embed.zeros_like(),
            pos_embed: self.pos_embed.as_ref().map(Tensor::zeros_like),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: l.attn_norm.zeros_like(),
                    wq: l.wq.zeros_like(),
                    wk: l.wk.zeros_like(),
                    wv: l.wv.zeros_like(),
                    wo: l.wo.zeros_like(),
                    mlp_norm: l.mlp_norm.zeros_like(),
                    w_up: l.w_up.zeros_like(),
                    w_down: l.w_down.zeros_like(),
                })
                .collect(),
            final_norm: self.final_norm.zeros_like(),
            out_proj: self.out_proj.zeros_like(),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("tok_embed".to_string(), &self.tok_embed));
        if let Some(pe) = &self.pos_embed {
            out.push(("pos_embed".to_string(), pe));
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &l.attn_norm));
            out.push((format!("layers.{i}.wq"), &l.wq));
            out.push((format!("layers.{i}.wk"), &l.wk));
            out.push((format!("layers.{i}.wv"), &l.wv));
            out.push((format!("layers.{i}.wo"), &l.wo));
            out.push((format!("layers.{i}.mlp_norm"), &l.mlp_norm));
            out.push((format!("layers.{i}.w_up"), &l.w_up));
            out.push((format!("layers.{i}.w_down"), &l.w_down));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("out_proj".to_string(), &self.out_proj));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("tok_embed".to_string(), &mut self.tok_embed));
        if let Some(pe) = &mut self.pos_embed {
            out.push(("pos_embed".to_string(), pe));
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), &mut l.attn_norm));
            out.push((format!("layers.{i}.wq"), &mut l.wq));
            out.push((format!("layers.{i}.wk"), &mut l.wk));
            out.push((format!("layers.{i}.wv"), &mut l.wv));
            out.push((format!("layers.{i}.wo"), &mut l.wo));
            out.push((format!("layers.{i}.mlp_norm"), &mut l.mlp_norm));
            out.push((format!("layers.{i}.w_up"), &mut l.w_up));
            out.push((format!("layers.{i}.w_down"), &mut l.w_down));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("out_proj".to_string(), &mut self.out_proj));
        out
    }

    pub fn param_count(&self) -> u64 {
        self.named().iter().map(|(_, t)| t.len() as u64).sum()
    }

    pub fn all_finite(&self) -> Option<String> {
        self.named()
            .into_iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(name, _)| name)
    }
}

/// Cross-entropy and auxiliary z-loss, both averaged over included positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_loss: f64,
    pub z_loss: f64,
    pub total: f64,
}

const RMS_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10_000.0;

fn rms_norm_row(x: &[f64], weight: &[f64], out: &mut [f64]) -> f64 {
    let d = x.len();
    let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / d as f64;
    let rstd = 1.0 / (ms + RMS_EPS).sqrt();
    for i in 0..d {
        out[i] = x[i] * rstd * weight[i];
    }
    rstd
}

/// d/dx and d/dw of RMSNorm given upstream gradient `g`.
fn rms_norm_backward_row(
    x: &[f64],
    weight: &[f64],
    rstd: f64,
    g: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
) {
    let d = x.len();
    let mut dot = 0.0;
    for i in 0..d {
        dot += g[i] * weight[i] * x[i];
    }
    let scale = rstd * rstd * rstd / d as f64;
    for i in 0..d {
        dx[i] += g[i] * weight[i] * rstd - x[i] * scale * dot;
        dw[i] += g[i] * x[i] * rstd;
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Rotates (or un-rotates, for the backward pass) q/k head slices in place.
fn rope_row(row: &mut [f64], pos: usize, n_heads: usize, head_dim: usize, invert: bool) {
    for h in 0..n_heads {
        let base = h * head_dim;
        for i in 0..head_dim / 2 {
            let theta = pos as f64 / ROPE_BASE.powf(2.0 * i as f64 / head_dim as f64);
            let (sin, cos) = theta.sin_cos();
            let sin = if invert { -sin } else { sin };
            let a = row[base + 2 * i];
            let b = row[base + 2 * i + 1];
            row[base + 2 * i] = a * cos - b * sin;
            row[base + 2 * i + 1] = a * sin + b * cos;
        }
    }
}

struct LayerCache {
    x_in: Vec<f64>,
    attn_normed: Vec<f64>,
    attn_rstd: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    att_merged: Vec<f64>,
    x_mid: Vec<f64>,
    mlp_normed: Vec<f64>,
    mlp_rstd: Vec<f64>,
    up: Vec<f64>,
    act: Vec<f64>,
}

struct ForwardCache {
    batch: usize,
    seq_len: usize,
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    final_normed: Vec<f64>,
    final_rstd: Vec<f64>,
    logits: Tensor,
}

fn flatten_batch(cfg: &ModelConfig, batch: &TokenBatch) -> Result<(usize, usize, Vec<u32>), ModelError> {
    let b = batch.sequences.len();
    if b == 0 {
        return Err(ModelError::Shape("empty batch".into()));
    }
    let l = batch.sequences[0].ids.len();
    if l > cfg.max_seq_len {
        return Err(ModelError::Shape(format!(
            "sequence length {l} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    let mut ids = Vec::with_capacity(b * l);
    for seq in &batch.sequences {
        if seq.ids.len() != l {
            return Err(ModelError::Shape("ragged batch".into()));
        }
        for &id in &seq.ids {
            if id as usize >= cfg.vocab_size {
                return Err(ModelError::IdOutOfRange {
                    id,
                    vocab_size: cfg.vocab_size,
                });
            }
            ids.push(id);
        }
    }
    Ok((b, l, ids))
}

fn run_forward(
    cfg: &ModelConfig,
    params: &Parameters,
    batch: &TokenBatch,
) -> Result<ForwardCache, ModelError> {
    cfg.validate()?;
    let (b, l, ids) = flatten_batch(cfg, batch)?;
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let v = cfg.vocab_size;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let bl = b * l;
    let scale = 1.0 / (hd as f64).sqrt();

    // Token embedding (+ learned positions when configured).
    let mut x = vec![0.0; bl * d];
    let emb = params.tok_embed.data();
    let pos_emb = params.pos_embed.as_ref().map(|p| p.data());
    for (r, &id) in ids.iter().enumerate() {
        let row = &mut x[r * d..(r + 1) * d];
        row.copy_from_slice(&emb[id as usize * d..(id as usize + 1) * d]);
        if let Some(pe) = pos_emb {
            let t = r % l;
            for (xi, pi) in row.iter_mut().zip(&pe[t * d..(t + 1) * d]) {
                *xi += pi;
            }
        }
    }
    let mut layer_caches = Vec::with_capacity(cfg.n_layers);
    for lp in &params.layers {
        let x_in = x.clone();

        let mut attn_normed = vec![0.0; bl * d];
        let mut attn_rstd = vec![0.0; bl];
        let norm_w = lp.attn_norm.data();
        attn_rstd
            .par_iter_mut()
            .zip(attn_normed.par_chunks_mut(d))
            .zip(x_in.par_chunks(d))
            .for_each(|((rstd, out), xin)| {
                *rstd = rms_norm_row(xin, norm_w, out);
            });

        let mut q = vec![0.0; bl * d];
        let mut k = vec![0.0; bl * d];
        let mut vv = vec![0.0; bl * d];
        matmul(&mut q, &attn_normed, lp.wq.data(), bl, d, d);
        matmul(&mut k, &attn_normed, lp.wk.data(), bl, d, d);
        matmul(&mut vv, &attn_normed, lp.wv.data(), bl, d, d);

        if cfg.positions == PositionScheme::Rotary {
            q.par_chunks_mut(d).enumerate().for_each(|(r, row)| {
                rope_row(row, r % l, heads, hd, false);
            });
            k.par_chunks_mut(d).enumerate().for_each(|(r, row)| {
                rope_row(row, r % l, heads, hd, false);
            });
        }

        // Causal attention, parallel over batch elements; heads run
        // sequentially inside so all writes stay disjoint.
        let mut probs = vec![0.0; b * heads * l * l];
        let mut att_merged = vec![0.0; bl * d];
        probs
            .par_chunks_mut(heads * l * l)
            .zip(att_merged.par_chunks_mut(l * d))
            .enumerate()
            .for_each(|(bi, (probs_b, merged_b))| {
                let q_b = &q[bi * l * d..(bi + 1) * l * d];
                let k_b = &k[bi * l * d..(bi + 1) * l * d];
                let v_b = &vv[bi * l * d..(bi + 1) * l * d];
                for h in 0..heads {
                    let col = h * hd;
                    let probs_h = &mut probs_b[h * l * l..(h + 1) * l * l];
                    for t in 0..l {
                        let q_t = &q_b[t * d + col..t * d + col + hd];
                        let row = &mut probs_h[t * l..t * l + t + 1];
                        let mut max = f64::NEG_INFINITY;
                        for (s, slot) in row.iter_mut().enumerate() {
                            let k_s = &k_b[s * d + col..s * d + col + hd];
                            let mut dot = 0.0;
                            for i in 0..hd {
                                dot += q_t[i] * k_s[i];
                            }
                            *slot = dot * scale;
                            if *slot > max {
                                max = *slot;
                            }
                        }
                        let mut sum = 0.0;
                        for slot in row.iter_mut() {
                            *slot = (*slot - max).exp();
                            sum += *slot;
                        }
                        let inv = 1.0 / sum;
                        for slot in row.iter_mut() {
                            *slot *= inv;
                        }
                        let out = &mut merged_b[t * d + col..t * d + col + hd];
                        out.fill(0.0);
                        for s in 0..=t {
                            let p = probs_h[t * l + s];
                            let v_s = &v_b[s * d + col..s * d + col + hd];
                            for i in 0..hd {
                                out[i] += p * v_s[i];
                            }
                        }
                    }
                }
            });

        let mut attn_out = vec![0.0; bl * d];
        matmul(&mut attn_out, &att_merged, lp.wo.data(), bl, d, d);
        let mut x_mid = x_in.clone();
        for (xm, a) in x_mid.iter_mut().zip(&attn_out) {
            *xm += a;
        }

        let mut mlp_normed = vec![0.0; bl * d];
        let mut mlp_rstd = vec![0.0; bl];
        let mlp_w = lp.mlp_norm.data();
        mlp_rstd
            .par_iter_mut()
            .zip(mlp_normed.par_chunks_mut(d))
            .zip(x_mid.par_chunks(d))
            .for_each(|((rstd, out), xin)| {
                *rstd = rms_norm_row(xin, mlp_w, out);
            });

        let mut up = vec![0.0; bl * f];
        matmul(&mut up, &mlp_normed, lp.w_up.data(), bl, d, f);
        let act: Vec<f64> = up.par_iter().map(|&u| gelu(u)).collect();
        let mut down = vec![0.0; bl * d];
        matmul(&mut down, &act, lp.w_down.data(), bl, f, d);

        let mut x_out = x_mid.clone();
        for (xo, dn) in x_out.iter_mut().zip(&down) {
            *xo += dn;
        }

        layer_caches.push(LayerCache {
            x_in,
            attn_normed,
            attn_rstd,
            q,
            k,
            v: vv,
            probs,
            att_merged,
            x_mid,
            mlp_normed,
            mlp_rstd,
            up,
            act,
        });
        x = x_out;
    }

    let mut final_normed = vec![0.0; bl * d];
    let mut final_rstd = vec![0.0; bl];
    let fw = params.final_norm.data();
    final_rstd
        .par_iter_mut()
        .zip(final_normed.par_chunks_mut(d))
        .zip(x.par_chunks(d))
        .for_each(|((rstd, out), xin)| {
            *rstd = rms_norm_row(xin, fw, out);
        });

    let mut logits = Tensor::zeros(&[b, l, v]);
    matmul(logits.data_mut(), &final_normed, params.out_proj.data(), bl, d, v);
    if !logits.is_finite() {
        return Err(ModelError::NonFinite("logits".into()));
    }

    Ok(ForwardCache {
        batch: b,
        seq_len: l,
        ids,
        layers: layer_caches,
        x_final: x,
        final_normed,
        final_rstd,
        logits,
    })
}

/// Runs the model over a batch and returns logits of shape (B, L, vocab).
pub fn forward(
    cfg: &ModelConfig,
    params: &Parameters,
    batch: &TokenBatch,
) -> Result<Tensor, ModelError> {
    run_forward(cfg, params, batch).map(|c| c.logits)
}

/// Positions contributing to the loss: position t predicts token t+1, so t
/// is included iff both t and t+1 carry real (unmasked) tokens.
fn included_positions(batch: &TokenBatch) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (bi, seq) in batch.sequences.iter().enumerate() {
        let l = seq.ids.len();
        for t in 0..l.saturating_sub(1) {
            if seq.loss_mask[t] && seq.loss_mask[t + 1] {
                out.push((bi, t));
            }
        }
    }
    out
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
    max + sum.ln()
}

/// Mean next-token cross-entropy plus z-loss over included positions.
pub fn loss(
    logits: &Tensor,
    batch: &TokenBatch,
    z_coeff: f64,
) -> Result<LossBreakdown, ModelError> {
    let shape = logits.shape();
    if shape.len() != 3 || shape[0] != batch.sequences.len() || shape[1] != batch.seq_len() {
        return Err(ModelError::Shape(format!(
            "logits shape {shape:?} does not match batch geometry"
        )));
    }
    let (l, v) = (shape[1], shape[2]);
    let included = included_positions(batch);
    if included.is_empty() {
        return Err(ModelError::NoIncludedPositions);
    }
    let data = logits.data();
    let mut ce = 0.0;
    let mut zl = 0.0;
    for &(bi, t) in &included {
        let row = &data[(bi * l + t) * v..(bi * l + t + 1) * v];
        let target = batch.sequences[bi].ids[t + 1] as usize;
        if target >= v {
            return Err(ModelError::IdOutOfRange {
                id: target as u32,
                vocab_size: v,
            });
        }
        let lse = log_sum_exp(row);
        ce += lse - row[target];
        zl += z_coeff * lse * lse;
    }
    let m = included.len() as f64;
    let ce_loss = ce / m;
    let z_loss = zl / m;
    Ok(LossBreakdown {
        ce_loss,
        z_loss,
        total: ce_loss + z_loss,
    })
}

/// Gradients of the total loss (cross-entropy plus z-loss) with respect to
/// every parameter tensor. Recomputes the forward pass internally.
pub fn backward(
    cfg: &ModelConfig,
    params: &Parameters,
    batch: &TokenBatch,
    z_coeff: f64,
) -> Result<(LossBreakdown, Parameters), ModelError> {
    let cache = run_forward(cfg, params, batch)?;
    let breakdown = loss(&cache.logits, batch, z_coeff)?;

    let b = cache.batch;
    let l = cache.seq_len;
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let v = cfg.vocab_size;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let bl = b * l;
    let scale = 1.0 / (hd as f64).sqrt();

    let included = included_positions(batch);
    let m = included.len() as f64;

    // dL/dlogits: softmax-minus-onehot for cross-entropy plus the z-loss
    // term 2*coef*logZ*softmax, averaged over included positions.
    let mut dlogits = vec![0.0; bl * v];
    {
        let data = cache.logits.data();
        for &(bi, t) in &included {
            let base = (bi * l + t) * v;
            let row = &data[base..base + v];
            let target = batch.sequences[bi].ids[t + 1] as usize;
            let lse = log_sum_exp(row);
            let zfac = 2.0 * z_coeff * lse;
            let drow = &mut dlogits[base..base + v];
            for j in 0..v {
                let p = (row[j] - lse).exp();
                drow[j] = (p + zfac * p) / m;
            }
            drow[target] -= 1.0 / m;
        }
    }

    let mut grads = params.zeros_like();

    // Output projection and final norm.
    matmul_at_acc(grads.out_proj.data_mut(), &cache.final_normed, &dlogits, bl, d, v);
    let mut d_final_normed = vec![0.0; bl * d];
    matmul_bt_acc(&mut d_final_normed, &dlogits, params.out_proj.data(), bl, v, d);
    drop(dlogits);

    let mut dx = vec![0.0; bl * d];
    for r in 0..bl {
        rms_norm_backward_row(
            &cache.x_final[r * d..(r + 1) * d],
            params.final_norm.data(),
            cache.final_rstd[r],
            &d_final_normed[r * d..(r + 1) * d],
            &mut dx[r * d..(r + 1) * d],
            grads.final_norm.data_mut(),
        );
    }
    drop(d_final_normed);

    for (li, lp) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let lg = &mut grads.layers[li];

        // MLP block: x_out = x_mid + gelu(norm(x_mid) W_up) W_down.
        let d_down = &dx; // gradient wrt the down-projection output
        matmul_at_acc(lg.w_down.data_mut(), &lc.act, d_down, bl, f, d);
        let mut d_act = vec![0.0; bl * f];
        matmul_bt_acc(&mut d_act, d_down, lp.w_down.data(), bl, d, f);
        let mut d_up = d_act;
        d_up.par_iter_mut().zip(lc.up.par_iter()).for_each(|(g, &u)| {
            *g *= gelu_grad(u);
        });
        matmul_at_acc(lg.w_up.data_mut(), &lc.mlp_normed, &d_up, bl, d, f);
        let mut d_mlp_normed = vec![0.0; bl * d];
        matmul_bt_acc(&mut d_mlp_normed, &d_up, lp.w_up.data(), bl, f, d);
        drop(d_up);

        let mut dx_mid = dx.clone(); // residual passthrough
        for r in 0..bl {
            rms_norm_backward_row(
                &lc.x_mid[r * d..(r + 1) * d],
                lp.mlp_norm.data(),
                lc.mlp_rstd[r],
                &d_mlp_normed[r * d..(r + 1) * d],
                &mut dx_mid[r * d..(r + 1) * d],
                lg.mlp_norm.data_mut(),
            );
        }
        drop(d_mlp_normed);

        // Attention block: x_mid = x_in + att(norm(x_in)) W_o.
        matmul_at_acc(lg.wo.data_mut(), &lc.att_merged, &dx_mid, bl, d, d);
        let mut d_merged = vec![0.0; bl * d];
        matmul_bt_acc(&mut d_merged, &dx_mid, lp.wo.data(), bl, d, d);

        let mut dq = vec![0.0; bl * d];
        let mut dk = vec![0.0; bl * d];
        let mut dv = vec![0.0; bl * d];
        dq.par_chunks_mut(l * d)
            .zip(dk.par_chunks_mut(l * d))
            .zip(dv.par_chunks_mut(l * d))
            .enumerate()
            .for_each(|(bi, ((dq_b, dk_b), dv_b))| {
                let q_b = &lc.q[bi * l * d..(bi + 1) * l * d];
                let k_b = &lc.k[bi * l * d..(bi + 1) * l * d];
                let v_b = &lc.v[bi * l * d..(bi + 1) * l * d];
                let probs_b = &lc.probs[bi * heads * l * l..(bi + 1) * heads * l * l];
                let dmerged_b = &d_merged[bi * l * d..(bi + 1) * l * d];
                let mut dp = vec![0.0; l];
                for h in 0..heads {
                    let col = h * hd;
                    let probs_h = &probs_b[h * l * l..(h + 1) * l * l];
                    for t in 0..l {
                        let dout = &dmerged_b[t * d + col..t * d + col + hd];
                        let p_row = &probs_h[t * l..t * l + t + 1];
                        // dV and dP.
                        let mut dot_pd = 0.0;
                        for s in 0..=t {
                            let v_s = &v_b[s * d + col..s * d + col + hd];
                            let mut acc = 0.0;
                            for i in 0..hd {
                                acc += dout[i] * v_s[i];
                            }
                            dp[s] = acc;
                            dot_pd += p_row[s] * acc;
                            let dv_s = &mut dv_b[s * d + col..s * d + col + hd];
                            let p = p_row[s];
                            for i in 0..hd {
                                dv_s[i] += p * dout[i];
                            }
                        }
                        // dScores through the softmax, then dQ and dK.
                        let q_t = &q_b[t * d + col..t * d + col + hd];
                        for s in 0..=t {
                            let ds = p_row[s] * (dp[s] - dot_pd) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let k_s = &k_b[s * d + col..s * d + col + hd];
                            let dq_t = &mut dq_b[t * d + col..t * d + col + hd];
                            for i in 0..hd {
                                dq_t[i] += ds * k_s[i];
                            }
                            let dk_s = &mut dk_b[s * d + col..s * d + col + hd];
                            for i in 0..hd {
                                dk_s[i] += ds * q_t[i];
                            }
                        }
                    }
                }
            });
        drop(d_merged);

        if cfg.positions == PositionScheme::Rotary {
            dq.par_chunks_mut(d).enumerate().for_each(|(r, row)| {
                rope_row(row, r % l, heads, hd, true);
            });
            dk.par_chunks_mut(d).enumerate().for_each(|(r, row)| {
                rope_row(row, r % l, heads, hd, true);
            });
        }

        matmul_at_acc(lg.wq.data_mut(), &lc.attn_normed, &dq, bl, d, d);
        matmul_at_acc(lg.wk.data_mut(), &lc.attn_normed, &dk, bl, d, d);
        matmul_at_acc(lg.wv.data_mut(), &lc.attn_normed, &dv, bl, d, d);
        let mut d_attn_normed = vec![0.0; bl * d];
        matmul_bt_acc(&mut d_attn_normed, &dq, lp.wq.data(), bl, d, d);
        matmul_bt_acc(&mut d_attn_normed, &dk, lp.wk.data(), bl, d, d);
        matmul_bt_acc(&mut d_attn_normed, &dv, lp.wv.data(), bl, d, d);
        drop(dq);
        drop(dk);
        drop(dv);

        let mut dx_in = dx_mid.clone(); // residual passthrough
        for r in 0..bl {
            rms_norm_backward_row(
                &lc.x_in[r * d..(r + 1) * d],
                lp.attn_norm.data(),
                lc.attn_rstd[r],
                &d_attn_normed[r * d..(r + 1) * d],
                &mut dx_in[r * d..(r + 1) * d],
                lg.attn_norm.data_mut(),
            );
        }
        dx = dx_in;
    }

    // Embedding scatter (and learned positions when configured).
    {
        let demb = grads.tok_embed.data_mut();
        for (r, &id) in cache.ids.iter().enumerate() {
            let src = &dx[r * d..(r + 1) * d];
            let dst = &mut demb[id as usize * d..(id as usize + 1) * d];
            for i in 0..d {
                dst[i] += src[i];
            }
        }
    }
    if let Some(dpe) = grads.pos_embed.as_mut() {
        let dpe = dpe.data_mut();
        for r in 0..bl {
            let t = r % l;
            let src = &dx[r * d..(r + 1) * d];
            let dst = &mut dpe[t * d..(t + 1) * d];
            for i in 0..d {
                dst[i] += src[i];
            }
        }
    }

    if let Some(name) = grads.all_finite() {
        return Err(ModelError::NonFinite(name));
    }
    Ok((breakdown, grads))
}
