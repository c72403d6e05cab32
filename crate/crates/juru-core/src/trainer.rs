//! The optimization recipe: non-factored AdaFactor with step-dependent
//! second-moment decay beta2(k) = 1 - k^(-0.8), first-order momentum 0.9,
//! dynamic weight decay by lr^2, global norm clipping at 1.0, and a linear
//! warmup into a constant learning rate. Plus the training loop itself, MFU
//! accounting, and checkpoint emission.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::model::{backward, ModelConfig, ModelError, Parameters};
use crate::packer::{BatchStream, PackError, PackedSequence};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("sink io failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("non-finite loss at step {step}; last good checkpoint retained")]
    NonFiniteLoss { step: u64 },
    #[error("non-finite gradient norm")]
    NonFiniteNorm,
    #[error("non-finite update in tensor {0}")]
    NonFiniteUpdate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecayMode {
    /// Decoupled decay by the squared learning rate, applied after the
    /// momentum update.
    LrSquared,
    Off,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub z_loss_coeff: f64,
    pub weight_decay: WeightDecayMode,
    /// Regularizer inside sqrt(v) + epsilon of the update rule.
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            peak_lr: 0.001,
            warmup_steps: 100,
            clip_norm: 1.0,
            z_loss_coeff: 1e-4,
            weight_decay: WeightDecayMode::LrSquared,
            epsilon: 1e-30,
        }
    }
}

impl OptimizerConfig {
    /// Linear warmup from 0 to peak_lr over warmup_steps, constant after.
    pub fn lr_schedule(&self, k: u64) -> f64 {
        if k >= self.warmup_steps {
            self.peak_lr
        } else {
            self.peak_lr * (k as f64 / self.warmup_steps as f64)
        }
    }

    /// Second-moment decay 1 - k^(-0.8); defined for k >= 1 only.
    pub fn beta2(&self, k: u64) -> f64 {
        assert!(k >= 1, "beta2 undefined before the first step");
        1.0 - (k as f64).powf(-0.8)
    }
}

/// First and second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Parameters,
    pub second_moment: Parameters,
}

impl OptimizerState {
    pub fn new(params: &Parameters) -> OptimizerState {
        OptimizerState {
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: Parameters,
    pub opt: OptimizerState,
    pub tokens_seen: u64,
    pub wall_time: f64,
}

impl TrainState {
    pub fn new(params: Parameters) -> TrainState {
        let opt = OptimizerState::new(&params);
        TrainState {
            params,
            opt,
            tokens_seen: 0,
            wall_time: 0.0,
        }
    }
}

/// Rescales all gradients jointly so their concatenated L2 norm does not
/// exceed `clip_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut Parameters, clip_norm: f64) -> Result<f64, TrainError> {
    let total_sq: f64 = grads.named().iter().map(|(_, t)| t.sum_of_squares()).sum();
    let norm = total_sq.sqrt();
    if !norm.is_finite() {
        return Err(TrainError::NonFiniteNorm);
    }
    if norm > clip_norm {
        let factor = clip_norm / norm;
        for (_, t) in grads.named_mut() {
            t.scale(factor);
        }
    }
    Ok(norm)
}

/// One optimizer step over already-clipped gradients:
///   k' = k + 1
///   v  = beta2(k') v + (1 - beta2(k')) g^2
///   u  = g / (sqrt(v) + eps)
///   m  = beta1 m + (1 - beta1) u
///   theta = theta - lr(k') m, then theta *= 1 - lr(k')^2
pub fn adafactor_step(
    state: &mut TrainState,
    grads: &Parameters,
    cfg: &OptimizerConfig,
) -> Result<(), TrainError> {
    let k_next = state.opt.step + 1;
    let beta2 = cfg.beta2(k_next);
    let lr = cfg.lr_schedule(k_next);
    let decay = match cfg.weight_decay {
        WeightDecayMode::LrSquared => 1.0 - lr * lr,
        WeightDecayMode::Off => 1.0,
    };

    let thetas = state.params.named_mut();
    let ms = state.opt.first_moment.named_mut();
    let vs = state.opt.second_moment.named_mut();
    let gs = grads.named();
    for (((theta, m), v), g) in thetas.into_iter().zip(ms).zip(vs).zip(gs) {
        debug_assert_eq!(theta.0, g.0, "parameter/gradient order mismatch");
        let name = theta.0;
        let theta = theta.1.data_mut();
        let m = m.1.data_mut();
        let v = v.1.data_mut();
        let g = g.1.data();
        let mut finite = true;
        for i in 0..theta.len() {
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let update = g[i] / (v[i].sqrt() + cfg.epsilon);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * update;
            theta[i] = (theta[i] - lr * m[i]) * decay;
            finite &= theta[i].is_finite();
        }
        if !finite {
            return Err(TrainError::NonFiniteUpdate(name));
        }
    }
    state.opt.step = k_next;
    Ok(())
}

/// Per-step record for the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub tokens_seen: u64,
    pub ce_loss: f64,
    pub z_loss: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Receives per-step records and checkpoint snapshots during training.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<(), TrainError> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _state: &TrainState) -> Result<(), TrainError> {
        Ok(())
    }
}

/// No-op observer for callers that only want the final state.
pub struct NullObserver;

impl TrainObserver for NullObserver {}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub total_steps: u64,
    pub checkpoint_every: u64,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    /// Allow corpora smaller than one batch by cycling sequences.
    pub repeat_to_fill: bool,
}

/// Runs the training loop: per step forward -> loss -> backward -> clip ->
/// adafactor_step, emitting a checkpoint at every multiple of
/// checkpoint_every. A non-finite loss aborts the run; checkpoints already
/// emitted stay valid.
pub fn train(
    model_cfg: &ModelConfig,
    opt_cfg: &OptimizerConfig,
    run: &TrainRunConfig,
    sequences: Vec<PackedSequence>,
    init: Parameters,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState, TrainError> {
    let mut stream = BatchStream::new(
        sequences,
        run.batch_size,
        run.shuffle_seed,
        run.repeat_to_fill,
    )?;
    let mut state = TrainState::new(init);
    let started = Instant::now();

    for _ in 0..run.total_steps {
        let batch = stream.next().expect("batch stream is infinite");
        let (breakdown, mut grads) = backward(model_cfg, &state.params, &batch, opt_cfg.z_loss_coeff)?;
        if !breakdown.total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: state.opt.step + 1,
            });
        }
        let grad_norm = clip_global_norm(&mut grads, opt_cfg.clip_norm)?;
        adafactor_step(&mut state, &grads, opt_cfg)?;
        state.tokens_seen += batch.token_slots();
        state.wall_time = started.elapsed().as_secs_f64();

        let record = StepRecord {
            step: state.opt.step,
            tokens_seen: state.tokens_seen,
            ce_loss: breakdown.ce_loss,
            z_loss: breakdown.z_loss,
            total: breakdown.total,
            lr: opt_cfg.lr_schedule(state.opt.step),
            grad_norm,
        };
        observer.on_step(&record)?;
        if state.opt.step % run.checkpoint_every == 0 {
            observer.on_checkpoint(&state)?;
        }
    }
    Ok(state)
}

/// Model FLOPs Utilization with the 6*N*T convention (self-attention
/// excluded). Values above 1 are reported as-is with the warning flag set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MfuReport {
    pub param_count: u64,
    pub tokens_processed: u64,
    pub elapsed_seconds: f64,
    pub peak_flops: f64,
    pub mfu: f64,
    pub exceeds_peak: bool,
}

pub fn mfu(param_count: u64, tokens_processed: u64, elapsed_seconds: f64, peak_flops: f64) -> MfuReport {
    let achieved = 6.0 * param_count as f64 * tokens_processed as f64 / elapsed_seconds;
    let mfu = achieved / peak_flops;
    MfuReport {
        param_count,
        tokens_processed,
        elapsed_seconds,
        peak_flops,
        mfu,
        exceeds_peak: mfu > 1.0,
    }
}
