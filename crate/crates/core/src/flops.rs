//! Analytic FLOP accounting for the model's forward/backward passes.
//!
//! Counts are exact under one fixed convention, shared between the tape
//! instrumentation and the closed-form totals here, so the two can be
//! compared as integers. The convention:
//!
//! * a multiply and an add each count as one FLOP (a matmul of
//!   [m,k]·[k,n] is 2mkn);
//! * transcendental kernels get fixed per-element charges (see [`cost`]);
//! * pure data movement (slicing, padding, concatenation, row selection)
//!   is free;
//! * gradient accumulation merges and masked-out attention positions are
//!   counted as if dense.

use crate::model::ModelConfig;
use serde::{Deserialize, Serialize};

/// Per-operation cost functions. The tape charges these at record time
/// (forward) and during the reverse sweep (backward); the closed-form
/// phase counts below are sums of the same terms.
pub mod cost {
    /// [m,k] · [k,n]
    pub fn matmul(m: usize, k: usize, n: usize) -> u64 {
        2 * (m as u64) * (k as u64) * (n as u64)
    }

    /// scale · (a[m,k] · b[n,k]ᵀ): the product plus one scaling pass.
    pub fn dot_nt(m: usize, k: usize, n: usize) -> u64 {
        matmul(m, k, n) + (m as u64) * (n as u64)
    }

    /// One operand side of the dot_nt backward: product plus scaling pass
    /// over the produced [rows, cols] gradient.
    pub fn dot_nt_bwd_side(rows: usize, inner: usize, cols: usize) -> u64 {
        matmul(rows, inner, cols) + (rows as u64) * (cols as u64)
    }

    pub fn elementwise(numel: u64) -> u64 {
        numel
    }

    pub const GELU_PER_ELEM: u64 = 8;
    pub const GELU_BWD_PER_ELEM: u64 = 10;
    pub const LAYER_NORM_PER_ELEM: u64 = 8;
    pub const LAYER_NORM_BWD_PER_ELEM: u64 = 16;
    pub const SOFTMAX_PER_ELEM: u64 = 5;
    pub const SOFTMAX_BWD_PER_ELEM: u64 = 4;
    pub const CE_PER_ELEM: u64 = 4;
    pub const CE_PER_ROW: u64 = 2;
    pub const CE_BWD_PER_ELEM: u64 = 3;
    /// Adam moment updates, bias correction and parameter step.
    pub const ADAM_PER_PARAM: u64 = 12;
    /// Squared-norm accumulation plus the conditional rescale.
    pub const CLIP_PER_PARAM: u64 = 3;

    pub fn gelu(numel: u64) -> u64 {
        GELU_PER_ELEM * numel
    }
    pub fn gelu_bwd(numel: u64) -> u64 {
        GELU_BWD_PER_ELEM * numel
    }
    pub fn layer_norm(rows: u64, cols: u64) -> u64 {
        LAYER_NORM_PER_ELEM * rows * cols
    }
    pub fn layer_norm_bwd(rows: u64, cols: u64) -> u64 {
        LAYER_NORM_BWD_PER_ELEM * rows * cols
    }
    pub fn softmax(numel: u64) -> u64 {
        SOFTMAX_PER_ELEM * numel
    }
    pub fn softmax_bwd(numel: u64) -> u64 {
        SOFTMAX_BWD_PER_ELEM * numel
    }
    pub fn cross_entropy(rows: u64, cols: u64) -> u64 {
        CE_PER_ELEM * rows * cols + CE_PER_ROW * rows
    }
    pub fn cross_entropy_bwd(rows: u64, cols: u64) -> u64 {
        CE_BWD_PER_ELEM * rows * cols
    }
}

/// Which part of the pipeline is being counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// One forward pass over a context/query batch, logits included.
    Forward,
    /// Forward + loss + backward + optimizer for a single dataset.
    TrainStep,
    /// Forward plus the per-task masked-softmax normalization of the
    /// query logits (which runs off-tape at inference).
    Inference,
}

/// The concrete shape of one dataset pass.
#[derive(Clone, Copy, Debug)]
pub struct PassShape {
    /// Total rows (context + query).
    pub n_rows: usize,
    /// Context rows; query rows are `n_rows - split`.
    pub split: usize,
    /// Active feature count. The encoders pad to `k_max`/`t_max`, so the
    /// counted cost is invariant in both `k` and `t`; they are carried for
    /// the record.
    pub k: usize,
    /// Active task count.
    pub t: usize,
}

/// Exact multiply-add count for one pass of the given phase.
///
/// The per-layer formulas mirror the tape's op inventory one-to-one; the
/// instrumentation test in this module's suite holds them to integer
/// equality.
pub fn count_flops(cfg: &ModelConfig, shape: PassShape, phase: Phase) -> u64 {
    match phase {
        Phase::Forward => forward_flops(cfg, shape),
        Phase::TrainStep => {
            forward_flops(cfg, shape)
                + loss_flops(cfg, shape)
                + backward_flops(cfg, shape)
                + optimizer_flops(cfg.param_count() as u64)
        }
        Phase::Inference => forward_flops(cfg, shape) + normalize_flops(cfg, shape),
    }
}

/// Forward pass, exactly as recorded on the tape. Independent of both the
/// active task count `t` (the y-encoder always projects the padded
/// `t_max`-wide labels) and the active feature count `k`.
pub fn forward_flops(cfg: &ModelConfig, shape: PassShape) -> u64 {
    let n = shape.n_rows;
    let ctx = shape.split;
    let q = n - ctx;
    let d = cfg.d_emb;
    let dff = cfg.d_ff();
    let dh = cfg.d_head();
    let heads = cfg.n_heads as u64;
    let nd = (n * d) as u64;

    let mut f = 0u64;
    // encoders: x projection over all rows, y projection over context rows
    f += cost::matmul(n, cfg.k_max, d) + cost::elementwise(nd);
    f += cost::matmul(ctx, cfg.t_max, d) + cost::elementwise((ctx * d) as u64);
    // pad_rows is free; summing the two embeddings is one add
    f += cost::elementwise(nd);
    for _ in 0..cfg.n_layers {
        f += cost::layer_norm(n as u64, d as u64);
        // q/k/v projections with biases
        f += 3 * (cost::matmul(n, d, d) + cost::elementwise(nd));
        f += heads
            * (cost::dot_nt(n, dh, n)
                + cost::softmax((n * n) as u64)
                + cost::matmul(n, n, dh));
        // output projection + bias + residual
        f += cost::matmul(n, d, d) + 2 * cost::elementwise(nd);
        f += cost::layer_norm(n as u64, d as u64);
        // feed-forward: W1 + bias, gelu, W2 + bias, residual
        f += cost::matmul(n, d, dff) + cost::elementwise((n * dff) as u64);
        f += cost::gelu((n * dff) as u64);
        f += cost::matmul(n, dff, d) + 2 * cost::elementwise(nd);
    }
    f += cost::layer_norm(n as u64, d as u64);
    // decoder on query rows only
    f += cost::matmul(q, d, cfg.d_hid()) + cost::elementwise((q * cfg.d_hid()) as u64);
    f += cost::gelu((q * cfg.d_hid()) as u64);
    f += cost::matmul(q, cfg.d_hid(), cfg.n_out()) + cost::elementwise((q * cfg.n_out()) as u64);
    f
}

/// Multitask loss graph: per-task column slices are free, each task costs
/// one cross-entropy over [q, c_max], tasks are combined with scalar adds
/// and one 1/T scale.
pub fn loss_flops(cfg: &ModelConfig, shape: PassShape) -> u64 {
    let q = (shape.n_rows - shape.split) as u64;
    let t = shape.t as u64;
    t * cost::cross_entropy(q, cfg.c_max as u64) + (t - 1) * cost::elementwise(1) + cost::elementwise(1)
}

/// Reverse sweep of forward + loss under the stated conventions (gradient
/// accumulation merges are free; leaf inputs receive no gradient, so the
/// encoder matmuls only pay their weight-side products).
pub fn backward_flops(cfg: &ModelConfig, shape: PassShape) -> u64 {
    let n = shape.n_rows;
    let ctx = shape.split;
    let q = n - ctx;
    let d = cfg.d_emb;
    let dff = cfg.d_ff();
    let dh = cfg.d_head();
    let heads = cfg.n_heads as u64;
    let nd = (n * d) as u64;
    let t = shape.t as u64;

    let mut f = 0u64;
    // loss backward: scale + per-task cross-entropies
    f += cost::elementwise(1);
    f += t * cost::cross_entropy_bwd(q as u64, cfg.c_max as u64);
    // decoder
    f += cost::matmul(q, cfg.n_out(), cfg.d_hid()) + cost::matmul(cfg.d_hid(), q, cfg.n_out());
    f += cost::elementwise((q * cfg.n_out()) as u64); // decoder output bias
    f += cost::gelu_bwd((q * cfg.d_hid()) as u64);
    f += cost::matmul(q, cfg.d_hid(), d) + cost::matmul(d, q, cfg.d_hid());
    f += cost::elementwise((q * cfg.d_hid()) as u64); // decoder hidden bias
    f += cost::layer_norm_bwd(n as u64, d as u64); // final norm
    for _ in 0..cfg.n_layers {
        // feed-forward, reverse order
        f += cost::matmul(n, d, dff) + cost::matmul(dff, n, d) + cost::elementwise(nd);
        f += cost::gelu_bwd((n * dff) as u64);
        f += cost::matmul(n, dff, d) + cost::matmul(d, n, dff) + cost::elementwise((n * dff) as u64);
        f += cost::layer_norm_bwd(n as u64, d as u64);
        // attention output projection
        f += cost::matmul(n, d, d) + cost::matmul(d, n, d) + cost::elementwise(nd);
        f += heads
            * (cost::matmul(n, dh, n) // dP of the AV product
                + cost::matmul(n, n, dh) // dV
                + cost::softmax_bwd((n * n) as u64)
                + 2 * cost::dot_nt_bwd_side(n, n, dh));
        // q/k/v projections
        f += 3 * (cost::matmul(n, d, d) + cost::matmul(d, n, d) + cost::elementwise(nd));
        f += cost::layer_norm_bwd(n as u64, d as u64);
    }
    // encoders: leaf inputs, so only the weight-side product plus bias sums
    f += cost::matmul(cfg.k_max, n, d) + cost::elementwise(nd);
    f += cost::matmul(cfg.t_max, ctx, d) + cost::elementwise((ctx * d) as u64);
    f
}

/// Adam update plus global-norm clipping for every parameter element.
pub fn optimizer_flops(param_count: u64) -> u64 {
    (cost::ADAM_PER_PARAM + cost::CLIP_PER_PARAM) * param_count
}

/// Off-tape inference normalization: one masked softmax over each task's
/// c_max-wide logit slice per query row, plus the renormalizing division.
pub fn normalize_flops(cfg: &ModelConfig, shape: PassShape) -> u64 {
    let q = (shape.n_rows - shape.split) as u64;
    (shape.t as u64) * q * (cost::SOFTMAX_PER_ELEM + 1) * cfg.c_max as u64
}

/// Per-phase counts with the extrapolation factors used to report totals,
/// mirroring the profile-then-extrapolate bookkeeping of the runtime study.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlopLedger {
    pub forward_batch: u64,
    pub train_step: u64,
    pub inference_batch: u64,
    pub batches_per_epoch: u64,
    pub epochs: u64,
    pub inference_batches: u64,
}

impl FlopLedger {
    pub fn new(cfg: &ModelConfig, shape: PassShape) -> Self {
        FlopLedger {
            forward_batch: count_flops(cfg, shape, Phase::Forward),
            train_step: count_flops(cfg, shape, Phase::TrainStep),
            inference_batch: count_flops(cfg, shape, Phase::Inference),
            batches_per_epoch: 1,
            epochs: 1,
            inference_batches: 1,
        }
    }

    pub fn with_extrapolation(mut self, batches_per_epoch: u64, epochs: u64, inference_batches: u64) -> Self {
        self.batches_per_epoch = batches_per_epoch;
        self.epochs = epochs;
        self.inference_batches = inference_batches;
        self
    }

    pub fn training_total(&self) -> u64 {
        self.train_step * self.batches_per_epoch * self.epochs
    }

    pub fn inference_total(&self) -> u64 {
        self.inference_batch * self.inference_batches
    }
}
