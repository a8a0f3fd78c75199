//! Attention primitives and the iterative slot-attention mechanism.
//!
//! The update rule, fixed for the whole crate:
//!
//! - attention logits `[N, K] = (features · Wk)(slots · Wq)ᵀ / √D`
//! - softmax over the **slot** axis per location (slots compete for pixels);
//!   this pre-renormalization attention is what [`AttentionMaskStack`] holds
//! - per-slot weights renormalized over locations with `ε = 1e-8` in the
//!   denominator so starved slots stay finite
//! - update `[K, D] = weightsᵀ · (features · Wv)`
//! - slot state advanced by a two-gate recurrent cell, then a residual
//!   perceptron with one hidden layer of width `2D` (tanh)
//!
//! All attention here is single-head. Cross-/self-attention blocks are the
//! residual form `out = q + softmax(QKᵀ/√D) V Wo`.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::optim::{visit_prefixed, visit_prefixed_mut, ParamGroup};
use crate::tensor::Tensor;

/// Renormalization guard for slot weights over locations.
pub const RENORM_EPS: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Dense per-location feature grid: `height * width` locations by `dim`
/// channels, row-major over the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    values: Tensor, // [height * width, dim]
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, values: Tensor) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::config("feature map dims must be positive"));
        }
        if values.rows() != height * width {
            return Err(Error::config(format!(
                "feature rows {} != height*width {}",
                values.rows(),
                height * width
            )));
        }
        if !values.all_finite() {
            return Err(Error::input("feature map contains non-finite values"));
        }
        Ok(FeatureMap {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    /// `[locations, dim]` value matrix.
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        self.values.row(i * self.width + j)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotRole {
    Foreground,
    Background,
}

/// Ordered collection of slot vectors, optionally with fixed fg/bg roles
/// (the two-slot indicator case).
#[derive(Clone, Debug, PartialEq)]
pub struct SlotSet {
    vectors: Tensor, // [count, dim]
    roles: Option<[SlotRole; 2]>,
}

impl SlotSet {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if !vectors.all_finite() {
            return Err(Error::input("slot vectors contain non-finite values"));
        }
        Ok(SlotSet {
            vectors,
            roles: None,
        })
    }

    /// Two-slot set with distinct roles; by convention row 0 is foreground.
    pub fn with_roles(vectors: Tensor, roles: [SlotRole; 2]) -> Result<Self> {
        if vectors.rows() != 2 {
            return Err(Error::config("role-tagged slot sets have exactly 2 slots"));
        }
        if roles[0] == roles[1] {
            return Err(Error::config("slot roles must be distinct"));
        }
        if !vectors.all_finite() {
            return Err(Error::input("slot vectors contain non-finite values"));
        }
        Ok(SlotSet {
            vectors,
            roles: Some(roles),
        })
    }

    pub fn count(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn roles(&self) -> Option<[SlotRole; 2]> {
        self.roles
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        self.vectors.row(k)
    }
}

/// Per-slot attention rendered as masks: `weights[k, i, j]`, nonnegative,
/// summing to 1 over `k` at every location.
#[derive(Clone, Debug)]
pub struct AttentionMaskStack {
    height: usize,
    width: usize,
    weights: Tensor, // [height * width, count] location-major
}

impl AttentionMaskStack {
    pub fn from_location_major(height: usize, width: usize, weights: Tensor) -> Result<Self> {
        if weights.rows() != height * width {
            return Err(Error::config("mask stack shape mismatch"));
        }
        let stack = AttentionMaskStack {
            height,
            width,
            weights,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<()> {
        for n in 0..self.weights.rows() {
            let row = self.weights.row(n);
            if row.iter().any(|&w| w < 0.0) {
                return Err(Error::input("attention weights must be nonnegative"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::input(format!(
                    "attention weights at location {n} sum to {s}, expected 1"
                )));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.weights.cols()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn weight(&self, k: usize, i: usize, j: usize) -> f64 {
        self.weights.get(i * self.width + j, k)
    }

    /// `[locations, count]` layout used internally everywhere.
    pub fn location_major(&self) -> &Tensor {
        &self.weights
    }

    /// One slot's mask flattened over the grid.
    pub fn slot_plane(&self, k: usize) -> Vec<f64> {
        (0..self.weights.rows())
            .map(|n| self.weights.get(n, k))
            .collect()
    }

    /// Per-location argmax over slots.
    pub fn argmax_labels(&self) -> Vec<u32> {
        argmax_rows(&self.weights)
    }
}

fn argmax_rows(weights: &Tensor) -> Vec<u32> {
    (0..weights.rows())
        .map(|n| {
            let row = weights.row(n);
            let mut best = 0usize;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect()
}

/// Per-slot decoder mixing weights (alpha masks). Same layout and
/// normalization contract as [`AttentionMaskStack`], kept as its own type
/// because it lives on the decoder side of the pipeline.
#[derive(Clone, Debug)]
pub struct MaskStack {
    height: usize,
    width: usize,
    alphas: Tensor, // [height * width, count] location-major
}

impl MaskStack {
    pub fn from_location_major(height: usize, width: usize, alphas: Tensor) -> Result<Self> {
        if alphas.rows() != height * width {
            return Err(Error::config("mask stack shape mismatch"));
        }
        let stack = MaskStack {
            height,
            width,
            alphas,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<()> {
        for n in 0..self.alphas.rows() {
            let row = self.alphas.row(n);
            if row.iter().any(|&w| w < 0.0) {
                return Err(Error::input("alpha weights must be nonnegative"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::input(format!(
                    "alpha weights at location {n} sum to {s}, expected 1"
                )));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.alphas.cols()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn alpha(&self, k: usize, i: usize, j: usize) -> f64 {
        self.alphas.get(i * self.width + j, k)
    }

    pub fn location_major(&self) -> &Tensor {
        &self.alphas
    }

    pub fn slot_plane(&self, k: usize) -> Vec<f64> {
        (0..self.alphas.rows())
            .map(|n| self.alphas.get(n, k))
            .collect()
    }

    pub fn argmax_labels(&self) -> Vec<u32> {
        argmax_rows(&self.alphas)
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

fn init_weight(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
}

/// Single-head residual attention block (used for both the fusion
/// cross-attention and self-attention).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// Output projection; zero-initialized by the fusion stage so the block
    /// starts as the identity on its queries.
    pub wo: Tensor,
}

impl AttentionParams {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionParams {
            wq: init_weight(dim, dim, rng),
            wk: init_weight(dim, dim, rng),
            wv: init_weight(dim, dim, rng),
            wo: init_weight(dim, dim, rng),
        }
    }

    /// Random q/k/v, zero output projection: residual path dominates.
    pub fn new_residual_identity(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::new(dim, rng);
        p.wo = Tensor::zeros(dim, dim);
        p
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }
}

impl ParamGroup for AttentionParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("wq", &self.wq);
        f("wk", &self.wk);
        f("wv", &self.wv);
        f("wo", &self.wo);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("wq", &mut self.wq);
        f("wk", &mut self.wk);
        f("wv", &mut self.wv);
        f("wo", &mut self.wo);
    }
}

/// Projections plus the recurrent/perceptron state advance of one slot
/// attention module.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotAttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    // two-gate recurrent cell
    pub gru_wz: Tensor,
    pub gru_uz: Tensor,
    pub gru_bz: Tensor,
    pub gru_wr: Tensor,
    pub gru_ur: Tensor,
    pub gru_br: Tensor,
    pub gru_wh: Tensor,
    pub gru_uh: Tensor,
    pub gru_bh: Tensor,
    // residual perceptron, hidden width 2D
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

impl SlotAttentionParams {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = 2 * dim;
        SlotAttentionParams {
            wq: init_weight(dim, dim, rng),
            wk: init_weight(dim, dim, rng),
            wv: init_weight(dim, dim, rng),
            gru_wz: init_weight(dim, dim, rng),
            gru_uz: init_weight(dim, dim, rng),
            gru_bz: Tensor::zeros(1, dim),
            gru_wr: init_weight(dim, dim, rng),
            gru_ur: init_weight(dim, dim, rng),
            gru_br: Tensor::zeros(1, dim),
            gru_wh: init_weight(dim, dim, rng),
            gru_uh: init_weight(dim, dim, rng),
            gru_bh: Tensor::zeros(1, dim),
            mlp_w1: init_weight(dim, hidden, rng),
            mlp_b1: Tensor::zeros(1, hidden),
            mlp_w2: init_weight(hidden, dim, rng),
            mlp_b2: Tensor::zeros(1, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }
}

impl ParamGroup for SlotAttentionParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("wq", &self.wq);
        f("wk", &self.wk);
        f("wv", &self.wv);
        f("gru_wz", &self.gru_wz);
        f("gru_uz", &self.gru_uz);
        f("gru_bz", &self.gru_bz);
        f("gru_wr", &self.gru_wr);
        f("gru_ur", &self.gru_ur);
        f("gru_br", &self.gru_br);
        f("gru_wh", &self.gru_wh);
        f("gru_uh", &self.gru_uh);
        f("gru_bh", &self.gru_bh);
        f("mlp_w1", &self.mlp_w1);
        f("mlp_b1", &self.mlp_b1);
        f("mlp_w2", &self.mlp_w2);
        f("mlp_b2", &self.mlp_b2);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("wq", &mut self.wq);
        f("wk", &mut self.wk);
        f("wv", &mut self.wv);
        f("gru_wz", &mut self.gru_wz);
        f("gru_uz", &mut self.gru_uz);
        f("gru_bz", &mut self.gru_bz);
        f("gru_wr", &mut self.gru_wr);
        f("gru_ur", &mut self.gru_ur);
        f("gru_br", &mut self.gru_br);
        f("gru_wh", &mut self.gru_wh);
        f("gru_uh", &mut self.gru_uh);
        f("gru_bh", &mut self.gru_bh);
        f("mlp_w1", &mut self.mlp_w1);
        f("mlp_b1", &mut self.mlp_b1);
        f("mlp_w2", &mut self.mlp_w2);
        f("mlp_b2", &mut self.mlp_b2);
    }
}

/// A slot module: the learned Gaussian the slots are drawn from plus the
/// attention parameters. The fusion stage and the bootstrap branch hold
/// structurally identical copies of this.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotModuleParams {
    pub init_mean: Tensor,    // [1, dim]
    pub init_log_std: Tensor, // [1, dim]
    pub attn: SlotAttentionParams,
}

impl SlotModuleParams {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        SlotModuleParams {
            init_mean: Tensor::randn(1, dim, 0.5, rng),
            init_log_std: Tensor::zeros(1, dim),
            attn: SlotAttentionParams::new(dim, rng),
        }
    }
}

impl ParamGroup for SlotModuleParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("init_mean", &self.init_mean);
        f("init_log_std", &self.init_log_std);
        visit_prefixed("attn", &self.attn, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("init_mean", &mut self.init_mean);
        f("init_log_std", &mut self.init_log_std);
        visit_prefixed_mut("attn", &mut self.attn, f);
    }
}

// ---------------------------------------------------------------------------
// Graph-level building blocks
// ---------------------------------------------------------------------------

/// Node handles of [`AttentionParams`] inside one graph.
#[derive(Clone, Copy)]
pub struct AttentionNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
}

impl AttentionParams {
    pub fn nodes(&self, g: &mut Graph, trainable: bool) -> AttentionNodes {
        let mut reg = |t: &Tensor| if trainable { g.leaf(t) } else { g.constant(t) };
        AttentionNodes {
            wq: reg(&self.wq),
            wk: reg(&self.wk),
            wv: reg(&self.wv),
            wo: reg(&self.wo),
        }
    }
}

impl AttentionNodes {
    /// Node ids in the same order as [`AttentionParams::visit`].
    pub fn id_list(&self) -> Vec<NodeId> {
        vec![self.wq, self.wk, self.wv, self.wo]
    }
}

/// Node handles of [`SlotAttentionParams`] inside one graph.
#[derive(Clone, Copy)]
pub struct SlotAttentionNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub gru_wz: NodeId,
    pub gru_uz: NodeId,
    pub gru_bz: NodeId,
    pub gru_wr: NodeId,
    pub gru_ur: NodeId,
    pub gru_br: NodeId,
    pub gru_wh: NodeId,
    pub gru_uh: NodeId,
    pub gru_bh: NodeId,
    pub mlp_w1: NodeId,
    pub mlp_b1: NodeId,
    pub mlp_w2: NodeId,
    pub mlp_b2: NodeId,
}

impl SlotAttentionParams {
    pub fn nodes(&self, g: &mut Graph, trainable: bool) -> SlotAttentionNodes {
        let mut reg = |t: &Tensor| if trainable { g.leaf(t) } else { g.constant(t) };
        SlotAttentionNodes {
            wq: reg(&self.wq),
            wk: reg(&self.wk),
            wv: reg(&self.wv),
            gru_wz: reg(&self.gru_wz),
            gru_uz: reg(&self.gru_uz),
            gru_bz: reg(&self.gru_bz),
            gru_wr: reg(&self.gru_wr),
            gru_ur: reg(&self.gru_ur),
            gru_br: reg(&self.gru_br),
            gru_wh: reg(&self.gru_wh),
            gru_uh: reg(&self.gru_uh),
            gru_bh: reg(&self.gru_bh),
            mlp_w1: reg(&self.mlp_w1),
            mlp_b1: reg(&self.mlp_b1),
            mlp_w2: reg(&self.mlp_w2),
            mlp_b2: reg(&self.mlp_b2),
        }
    }
}

impl SlotAttentionNodes {
    /// Node ids in the same order as [`SlotAttentionParams::visit`].
    pub fn id_list(&self) -> Vec<NodeId> {
        vec![
            self.wq,
            self.wk,
            self.wv,
            self.gru_wz,
            self.gru_uz,
            self.gru_bz,
            self.gru_wr,
            self.gru_ur,
            self.gru_br,
            self.gru_wh,
            self.gru_uh,
            self.gru_bh,
            self.mlp_w1,
            self.mlp_b1,
            self.mlp_w2,
            self.mlp_b2,
        ]
    }
}

/// One slot-attention iteration on the graph. `features` is `[N, D]`,
/// `slots` is `[K, D]`. Returns (updated slots, pre-renormalization
/// attention `[N, K]`).
pub fn slot_attention_step_g(
    g: &mut Graph,
    features: NodeId,
    slots: NodeId,
    p: &SlotAttentionNodes,
) -> (NodeId, NodeId) {
    let dim = g.value(features).cols() as f64;
    let keys = g.matmul(features, p.wk); // [N, D]
    let values = g.matmul(features, p.wv); // [N, D]
    let queries = g.matmul(slots, p.wq); // [K, D]
    let queries_t = g.transpose(queries); // [D, K]
    let logits = g.matmul(keys, queries_t); // [N, K]
    let logits = g.mul_scalar(logits, 1.0 / dim.sqrt());
    let attn = g.softmax_rows(logits); // softmax over slot axis

    // renormalize each slot's weights over locations
    let totals = g.sum_rows(attn); // [1, K]
    let totals = g.add_scalar(totals, RENORM_EPS);
    let weights = g.div_row(attn, totals); // [N, K]
    let weights_t = g.transpose(weights); // [K, N]
    let updates = g.matmul(weights_t, values); // [K, D]

    // two-gate recurrent cell: z gates the candidate, r gates the state
    let uz = g.matmul(updates, p.gru_wz);
    let sz = g.matmul(slots, p.gru_uz);
    let z_pre = g.add(uz, sz);
    let z_pre = g.add_row(z_pre, p.gru_bz);
    let z = g.sigmoid(z_pre);

    let ur = g.matmul(updates, p.gru_wr);
    let sr = g.matmul(slots, p.gru_ur);
    let r_pre = g.add(ur, sr);
    let r_pre = g.add_row(r_pre, p.gru_br);
    let r = g.sigmoid(r_pre);

    let rs = g.mul(r, slots);
    let uh = g.matmul(updates, p.gru_wh);
    let sh = g.matmul(rs, p.gru_uh);
    let h_pre = g.add(uh, sh);
    let h_pre = g.add_row(h_pre, p.gru_bh);
    let candidate = g.tanh(h_pre);

    let one_minus_z = {
        let nz = g.neg(z);
        g.add_scalar(nz, 1.0)
    };
    let keep = g.mul(one_minus_z, slots);
    let take = g.mul(z, candidate);
    let gru_out = g.add(keep, take);

    // residual perceptron
    let h1 = g.matmul(gru_out, p.mlp_w1);
    let h1 = g.add_row(h1, p.mlp_b1);
    let h1 = g.tanh(h1);
    let h2 = g.matmul(h1, p.mlp_w2);
    let h2 = g.add_row(h2, p.mlp_b2);
    let out = g.add(gru_out, h2);

    (out, attn)
}

/// `iterations` chained steps; returns final slots and the final attention.
pub fn run_slot_attention_g(
    g: &mut Graph,
    features: NodeId,
    init_slots: NodeId,
    p: &SlotAttentionNodes,
    iterations: usize,
) -> (NodeId, NodeId) {
    assert!(iterations >= 1);
    let mut slots = init_slots;
    let mut attn = None;
    for _ in 0..iterations {
        let (s, a) = slot_attention_step_g(g, features, slots, p);
        slots = s;
        attn = Some(a);
    }
    (slots, attn.unwrap())
}

/// Residual scaled dot-product attention: queries `[M, D]` against
/// keys/values `[N, D]`.
pub fn cross_attention_g(
    g: &mut Graph,
    queries: NodeId,
    keys_values: NodeId,
    p: &AttentionNodes,
) -> NodeId {
    let dim = g.value(queries).cols() as f64;
    let q = g.matmul(queries, p.wq);
    let k = g.matmul(keys_values, p.wk);
    let v = g.matmul(keys_values, p.wv);
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt); // [M, N]
    let logits = g.mul_scalar(logits, 1.0 / dim.sqrt());
    let attn = g.softmax_rows(logits); // softmax over the key axis
    let mixed = g.matmul(attn, v);
    let projected = g.matmul(mixed, p.wo);
    g.add(queries, projected)
}

pub fn self_attention_g(g: &mut Graph, tokens: NodeId, p: &AttentionNodes) -> NodeId {
    cross_attention_g(g, tokens, tokens, p)
}

// ---------------------------------------------------------------------------
// Data-level operations
// ---------------------------------------------------------------------------

/// Sample `count` slot vectors i.i.d. from the learned Gaussian
/// `N(mean, exp(log_std)^2)`. Deterministic for a fixed seed.
pub fn init_slots(
    count: usize,
    dim: usize,
    mean: &Tensor,
    log_std: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<SlotSet> {
    if count == 0 || dim == 0 {
        return Err(Error::config("slot count and dim must be positive"));
    }
    if mean.shape() != (1, dim) || log_std.shape() != (1, dim) {
        return Err(Error::config(format!(
            "slot init parameters must be [1, {dim}], got {:?} and {:?}",
            mean.shape(),
            log_std.shape()
        )));
    }
    let vectors = sample_slot_tensor(count, mean, log_std, rng);
    SlotSet::new(vectors)
}

/// The raw sampling used by [`init_slots`] and by the training graphs
/// (which re-derive it from tracked mean/log_std nodes and this noise).
pub fn slot_noise(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(count, dim, 1.0, rng)
}

fn sample_slot_tensor(
    count: usize,
    mean: &Tensor,
    log_std: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let noise = slot_noise(count, mean.cols(), rng);
    let mut out = Tensor::zeros(count, mean.cols());
    for k in 0..count {
        for d in 0..mean.cols() {
            let std = log_std.get(0, d).exp();
            out.set(k, d, mean.get(0, d) + std * noise.get(k, d));
        }
    }
    out
}

/// Reparameterized slot sampling on the graph: `mean + exp(log_std) ⊙ noise`
/// with the noise held constant, so gradients reach the Gaussian parameters.
pub fn sample_slots_g(
    g: &mut Graph,
    mean: NodeId,
    log_std: NodeId,
    noise: &Tensor,
) -> NodeId {
    let count = noise.rows();
    let std = g.exp(log_std); // [1, D]
    let mean_b = g.broadcast_rows(mean, count);
    let std_b = g.broadcast_rows(std, count);
    let noise_c = g.constant(noise);
    let scaled = g.mul(std_b, noise_c);
    g.add(mean_b, scaled)
}

fn check_dims(features: &FeatureMap, slots: &SlotSet, params: &SlotAttentionParams) -> Result<()> {
    if features.dim() != params.dim() {
        return Err(Error::config(format!(
            "feature dim {} incompatible with projection dim {}",
            features.dim(),
            params.dim()
        )));
    }
    if slots.dim() != params.dim() {
        return Err(Error::config(format!(
            "slot dim {} incompatible with projection dim {}",
            slots.dim(),
            params.dim()
        )));
    }
    if slots.count() == 0 {
        return Err(Error::config("need at least one slot"));
    }
    Ok(())
}

/// One slot-attention update on plain data.
pub fn slot_attention_step(
    features: &FeatureMap,
    slots: &SlotSet,
    params: &SlotAttentionParams,
) -> Result<(SlotSet, AttentionMaskStack)> {
    check_dims(features, slots, params)?;
    let mut g = Graph::new();
    let f = g.constant(features.values());
    let s = g.constant(slots.vectors());
    let p = params.nodes(&mut g, false);
    let (out, attn) = slot_attention_step_g(&mut g, f, s, &p);
    let updated = SlotSet {
        vectors: g.value(out).clone(),
        roles: slots.roles(),
    };
    let stack = AttentionMaskStack::from_location_major(
        features.height(),
        features.width(),
        g.value(attn).clone(),
    )?;
    Ok((updated, stack))
}

/// Apply [`slot_attention_step`] `iterations` times.
pub fn run_slot_attention(
    features: &FeatureMap,
    init: &SlotSet,
    params: &SlotAttentionParams,
    iterations: usize,
) -> Result<(SlotSet, AttentionMaskStack)> {
    if iterations < 1 {
        return Err(Error::config("iterations must be >= 1"));
    }
    check_dims(features, init, params)?;
    let mut g = Graph::new();
    let f = g.constant(features.values());
    let s = g.constant(init.vectors());
    let p = params.nodes(&mut g, false);
    let (out, attn) = run_slot_attention_g(&mut g, f, s, &p, iterations);
    let updated = SlotSet {
        vectors: g.value(out).clone(),
        roles: init.roles(),
    };
    let stack = AttentionMaskStack::from_location_major(
        features.height(),
        features.width(),
        g.value(attn).clone(),
    )?;
    Ok((updated, stack))
}

/// Residual cross-attention on plain data; `queries` is `[M, D]`,
/// `keys_values` is `[N, D]`.
pub fn cross_attention(
    queries: &Tensor,
    keys_values: &Tensor,
    params: &AttentionParams,
) -> Result<Tensor> {
    if queries.cols() != keys_values.cols() || queries.cols() != params.dim() {
        return Err(Error::config(format!(
            "attention dims mismatch: queries [{}, {}], keys [{}, {}], params dim {}",
            queries.rows(),
            queries.cols(),
            keys_values.rows(),
            keys_values.cols(),
            params.dim()
        )));
    }
    let mut g = Graph::new();
    let q = g.constant(queries);
    let kv = g.constant(keys_values);
    let p = params.nodes(&mut g, false);
    let out = cross_attention_g(&mut g, q, kv, &p);
    Ok(g.value(out).clone())
}

pub fn self_attention(tokens: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    cross_attention(tokens, tokens, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, DEFAULT_STEP, DEFAULT_TOL};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn features(h: usize, w: usize, d: usize, seed: u64) -> FeatureMap {
        FeatureMap::new(h, w, Tensor::randn(h * w, d, 1.0, &mut rng(seed))).unwrap()
    }

    // ---- scalar oracle -------------------------------------------------------

    fn softmax_vec(row: &[f64]) -> Vec<f64> {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|&x| x / s).collect()
    }

    fn mat_vec(m: &Tensor, v: &[f64]) -> Vec<f64> {
        // v * M for a row vector v
        let mut out = vec![0.0; m.cols()];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &mij) in out.iter_mut().zip(m.row(i)) {
                *o += vi * mij;
            }
        }
        out
    }

    /// Scalar-loop recomputation of one slot attention step.
    fn step_oracle(
        features: &FeatureMap,
        slots: &SlotSet,
        p: &SlotAttentionParams,
    ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n = features.locations();
        let k = slots.count();
        let d = features.dim();
        let keys: Vec<Vec<f64>> = (0..n)
            .map(|i| mat_vec(&p.wk, features.values().row(i)))
            .collect();
        let values: Vec<Vec<f64>> = (0..n)
            .map(|i| mat_vec(&p.wv, features.values().row(i)))
            .collect();
        let queries: Vec<Vec<f64>> = (0..k).map(|s| mat_vec(&p.wq, slots.vector(s))).collect();
        let mut attn = vec![vec![0.0; k]; n];
        for i in 0..n {
            let logits: Vec<f64> = (0..k)
                .map(|s| {
                    keys[i]
                        .iter()
                        .zip(&queries[s])
                        .map(|(&a, &b)| a * b)
                        .sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            attn[i] = softmax_vec(&logits);
        }
        let mut updates = vec![vec![0.0; d]; k];
        for s in 0..k {
            let total: f64 = (0..n).map(|i| attn[i][s]).sum::<f64>() + RENORM_EPS;
            for i in 0..n {
                let w = attn[i][s] / total;
                for c in 0..d {
                    updates[s][c] += w * values[i][c];
                }
            }
        }
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut out = vec![vec![0.0; d]; k];
        for s in 0..k {
            let u = &updates[s];
            let h = slots.vector(s);
            let z: Vec<f64> = {
                let a = mat_vec(&p.gru_wz, u);
                let b = mat_vec(&p.gru_uz, h);
                (0..d)
                    .map(|c| sigmoid(a[c] + b[c] + p.gru_bz.get(0, c)))
                    .collect()
            };
            let r: Vec<f64> = {
                let a = mat_vec(&p.gru_wr, u);
                let b = mat_vec(&p.gru_ur, h);
                (0..d)
                    .map(|c| sigmoid(a[c] + b[c] + p.gru_br.get(0, c)))
                    .collect()
            };
            let rs: Vec<f64> = (0..d).map(|c| r[c] * h[c]).collect();
            let cand: Vec<f64> = {
                let a = mat_vec(&p.gru_wh, u);
                let b = mat_vec(&p.gru_uh, &rs);
                (0..d)
                    .map(|c| (a[c] + b[c] + p.gru_bh.get(0, c)).tanh())
                    .collect()
            };
            let gru: Vec<f64> = (0..d)
                .map(|c| (1.0 - z[c]) * h[c] + z[c] * cand[c])
                .collect();
            let hidden: Vec<f64> = {
                let a = mat_vec(&p.mlp_w1, &gru);
                (0..p.mlp_w1.cols())
                    .map(|c| (a[c] + p.mlp_b1.get(0, c)).tanh())
                    .collect()
            };
            let mlp = mat_vec(&p.mlp_w2, &hidden);
            for c in 0..d {
                out[s][c] = gru[c] + mlp[c] + p.mlp_b2.get(0, c);
            }
        }
        (out, attn)
    }

    // ---- init_slots ----------------------------------------------------------

    #[test]
    fn degenerate_log_std_collapses_to_mean() {
        let mean = Tensor::from_vec(1, 3, vec![0.5, -1.0, 2.0]);
        let log_std = Tensor::filled(1, 3, f64::NEG_INFINITY);
        let slots = init_slots(4, 3, &mean, &log_std, &mut rng(0)).unwrap();
        for k in 0..4 {
            assert_eq!(slots.vector(k), mean.row(0));
        }
    }

    #[test]
    fn init_slots_deterministic_per_seed_and_sensitive_to_it() {
        let mean = Tensor::zeros(1, 3);
        let log_std = Tensor::zeros(1, 3);
        let a = init_slots(3, 3, &mean, &log_std, &mut rng(1)).unwrap();
        let b = init_slots(3, 3, &mean, &log_std, &mut rng(1)).unwrap();
        assert_eq!(a.vectors(), b.vectors());
        let c = init_slots(3, 3, &mean, &log_std, &mut rng(2)).unwrap();
        assert_ne!(a.vectors(), c.vectors());
    }

    #[test]
    fn init_slots_rejects_bad_dims() {
        let mean = Tensor::zeros(1, 3);
        let log_std = Tensor::zeros(1, 3);
        assert!(init_slots(0, 3, &mean, &log_std, &mut rng(0)).is_err());
        assert!(init_slots(2, 4, &mean, &log_std, &mut rng(0)).is_err());
    }

    // ---- slot_attention_step ----------------------------------------------------

    #[test]
    fn single_slot_gets_full_attention_and_mean_update() {
        let f = features(2, 2, 3, 10);
        let p = SlotAttentionParams::new(3, &mut rng(11));
        let slots = SlotSet::new(Tensor::randn(1, 3, 1.0, &mut rng(12))).unwrap();
        let (_, attn) = slot_attention_step(&f, &slots, &p).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(attn.weight(0, i, j), 1.0);
            }
        }
        // update (pre-GRU) equals the location mean of values up to the
        // renormalization epsilon; verify through the scalar oracle instead
        let (oracle_slots, _) = step_oracle(&f, &slots, &p);
        let (stepped, _) = slot_attention_step(&f, &slots, &p).unwrap();
        for c in 0..3 {
            assert!((stepped.vector(0)[c] - oracle_slots[0][c]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_slots_attend_identically() {
        let f = features(2, 3, 4, 13);
        let p = SlotAttentionParams::new(4, &mut rng(14));
        let v = Tensor::randn(1, 4, 1.0, &mut rng(15));
        let two = Tensor::from_vec(2, 4, [v.row(0), v.row(0)].concat());
        let slots = SlotSet::new(two).unwrap();
        let (_, attn) = slot_attention_step(&f, &slots, &p).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!((attn.weight(0, i, j) - attn.weight(1, i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn step_matches_scalar_oracle() {
        let f = features(2, 2, 3, 16);
        let p = SlotAttentionParams::new(3, &mut rng(17));
        let slots = SlotSet::new(Tensor::randn(2, 3, 1.0, &mut rng(18))).unwrap();
        let (stepped, attn) = slot_attention_step(&f, &slots, &p).unwrap();
        let (oracle_slots, oracle_attn) = step_oracle(&f, &slots, &p);
        for s in 0..2 {
            for c in 0..3 {
                assert!(
                    (stepped.vector(s)[c] - oracle_slots[s][c]).abs() < 1e-12,
                    "slot {s} channel {c}"
                );
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                for s in 0..2 {
                    assert!(
                        (attn.weight(s, i, j) - oracle_attn[i * 2 + j][s]).abs() < 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn step_dim_mismatch_is_config_error() {
        let f = features(1, 1, 3, 19);
        let p = SlotAttentionParams::new(4, &mut rng(20));
        let slots = SlotSet::new(Tensor::zeros(1, 4)).unwrap();
        assert!(matches!(
            slot_attention_step(&f, &slots, &p),
            Err(Error::Config(_))
        ));
    }

    // ---- run_slot_attention ----------------------------------------------------

    #[test]
    fn one_iteration_equals_one_step() {
        let f = features(2, 2, 4, 21);
        let p = SlotAttentionParams::new(4, &mut rng(22));
        let init = SlotSet::new(Tensor::randn(3, 4, 1.0, &mut rng(23))).unwrap();
        let (s1, a1) = run_slot_attention(&f, &init, &p, 1).unwrap();
        let (s2, a2) = slot_attention_step(&f, &init, &p).unwrap();
        assert_eq!(s1.vectors(), s2.vectors());
        assert_eq!(a1.location_major(), a2.location_major());
    }

    #[test]
    fn three_iterations_equal_manual_chaining() {
        let f = features(2, 2, 4, 24);
        let p = SlotAttentionParams::new(4, &mut rng(25));
        let init = SlotSet::new(Tensor::randn(2, 4, 1.0, &mut rng(26))).unwrap();
        let (s3, a3) = run_slot_attention(&f, &init, &p, 3).unwrap();
        let (m1, _) = slot_attention_step(&f, &init, &p).unwrap();
        let (m2, _) = slot_attention_step(&f, &m1, &p).unwrap();
        let (m3, am3) = slot_attention_step(&f, &m2, &p).unwrap();
        assert_eq!(s3.vectors(), m3.vectors());
        assert_eq!(a3.location_major(), am3.location_major());
    }

    #[test]
    fn run_is_bitwise_reproducible_and_rejects_zero_iterations() {
        let f = features(2, 2, 4, 27);
        let p = SlotAttentionParams::new(4, &mut rng(28));
        let init = SlotSet::new(Tensor::randn(2, 4, 1.0, &mut rng(29))).unwrap();
        let (s1, _) = run_slot_attention(&f, &init, &p, 3).unwrap();
        let (s2, _) = run_slot_attention(&f, &init, &p, 3).unwrap();
        assert_eq!(s1.vectors(), s2.vectors());
        assert!(run_slot_attention(&f, &init, &p, 0).is_err());
    }

    #[test]
    fn permuting_initial_slots_permutes_outputs() {
        let f = features(3, 3, 4, 30);
        let p = SlotAttentionParams::new(4, &mut rng(31));
        let init = Tensor::randn(3, 4, 1.0, &mut rng(32));
        let perm = [2usize, 0, 1];
        let mut permuted = Tensor::zeros(3, 4);
        for (dst, &src) in perm.iter().enumerate() {
            permuted.row_mut(dst).copy_from_slice(init.row(src));
        }
        let (s_a, a_a) = run_slot_attention(
            &f,
            &SlotSet::new(init).unwrap(),
            &p,
            3,
        )
        .unwrap();
        let (s_b, a_b) = run_slot_attention(&f, &SlotSet::new(permuted).unwrap(), &p, 3).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((s_b.vector(dst)[c] - s_a.vector(src)[c]).abs() < 1e-9);
            }
            for i in 0..3 {
                for j in 0..3 {
                    assert!((a_b.weight(dst, i, j) - a_a.weight(src, i, j)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn slot_attention_gradients_match_finite_differences() {
        // scalar functional of the final slots w.r.t. every parameter tensor
        let f = features(2, 2, 3, 33);
        let p = SlotAttentionParams::new(3, &mut rng(34));
        let init = Tensor::randn(2, 3, 1.0, &mut rng(35));
        let inputs: Vec<Tensor> = {
            let mut v = Vec::new();
            p.visit(&mut |_, t| v.push(t.clone()));
            v
        };
        check_gradients(
            |g, ids| {
                let nodes = SlotAttentionNodes {
                    wq: ids[0],
                    wk: ids[1],
                    wv: ids[2],
                    gru_wz: ids[3],
                    gru_uz: ids[4],
                    gru_bz: ids[5],
                    gru_wr: ids[6],
                    gru_ur: ids[7],
                    gru_br: ids[8],
                    gru_wh: ids[9],
                    gru_uh: ids[10],
                    gru_bh: ids[11],
                    mlp_w1: ids[12],
                    mlp_b1: ids[13],
                    mlp_w2: ids[14],
                    mlp_b2: ids[15],
                };
                let feat = g.constant(f.values());
                let slots = g.constant(&init);
                let (out, _) = run_slot_attention_g(g, feat, slots, &nodes, 2);
                let sq = g.mul(out, out);
                g.sum_all(sq)
            },
            &inputs,
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
    }

    // ---- cross/self attention -----------------------------------------------------

    #[test]
    fn single_key_gets_weight_one() {
        let p = AttentionParams::new(3, &mut rng(36));
        let q = Tensor::randn(4, 3, 1.0, &mut rng(37));
        let kv = Tensor::randn(1, 3, 1.0, &mut rng(38));
        // with one key the attention output is exactly v W_v W_o + residual
        let out = cross_attention(&q, &kv, &p).unwrap();
        let v = kv.matmul(&p.wv).matmul(&p.wo);
        for m in 0..4 {
            for c in 0..3 {
                let expect = q.get(m, c) + v.get(0, c);
                assert!((out.get(m, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_queries_produce_identical_rows() {
        let p = AttentionParams::new(3, &mut rng(39));
        let row = Tensor::randn(1, 3, 1.0, &mut rng(40));
        let q = Tensor::from_vec(2, 3, [row.row(0), row.row(0)].concat());
        let kv = Tensor::randn(4, 3, 1.0, &mut rng(41));
        let out = cross_attention(&q, &kv, &p).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn cross_attention_matches_scalar_oracle() {
        let p = AttentionParams::new(2, &mut rng(42));
        let q = Tensor::randn(2, 2, 1.0, &mut rng(43));
        let kv = Tensor::randn(2, 2, 1.0, &mut rng(44));
        let out = cross_attention(&q, &kv, &p).unwrap();
        let qm = q.matmul(&p.wq);
        let km = kv.matmul(&p.wk);
        let vm = kv.matmul(&p.wv);
        for m in 0..2 {
            let logits: Vec<f64> = (0..2)
                .map(|n| {
                    qm.row(m)
                        .iter()
                        .zip(km.row(n))
                        .map(|(&a, &b)| a * b)
                        .sum::<f64>()
                        / (2f64).sqrt()
                })
                .collect();
            let w = softmax_vec(&logits);
            let mixed: Vec<f64> = (0..2)
                .map(|c| w[0] * vm.get(0, c) + w[1] * vm.get(1, c))
                .collect();
            let projected = mat_vec(&p.wo, &mixed);
            for c in 0..2 {
                assert!((out.get(m, c) - (q.get(m, c) + projected[c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_attention_single_token_is_residual_plus_projection() {
        let p = AttentionParams::new(3, &mut rng(45));
        let t = Tensor::randn(1, 3, 1.0, &mut rng(46));
        let out = self_attention(&t, &p).unwrap();
        let v = t.matmul(&p.wv).matmul(&p.wo);
        for c in 0..3 {
            assert!((out.get(0, c) - (t.get(0, c) + v.get(0, c))).abs() < 1e-12);
        }
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let p = AttentionParams::new(3, &mut rng(47));
        let t = Tensor::randn(3, 3, 1.0, &mut rng(48));
        let perm = [1usize, 2, 0];
        let mut tp = Tensor::zeros(3, 3);
        for (dst, &src) in perm.iter().enumerate() {
            tp.row_mut(dst).copy_from_slice(t.row(src));
        }
        let a = self_attention(&t, &p).unwrap();
        let b = self_attention(&tp, &p).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..3 {
                assert!((b.get(dst, c) - a.get(src, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn attention_dim_mismatch_is_config_error() {
        let p = AttentionParams::new(3, &mut rng(49));
        let q = Tensor::zeros(1, 4);
        let kv = Tensor::zeros(1, 4);
        assert!(matches!(
            cross_attention(&q, &kv, &p),
            Err(Error::Config(_))
        ));
    }

    // ---- normalization property ------------------------------------------------------

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn attention_rows_always_sum_to_one(
            seed in 0u64..1_000_000,
            h in 1usize..4,
            w in 1usize..4,
            k in 1usize..5,
            d in 1usize..5,
        ) {
            let f = features(h, w, d, seed);
            let p = SlotAttentionParams::new(d, &mut rng(seed ^ 0xabc));
            let init = SlotSet::new(Tensor::randn(k, d, 1.0, &mut rng(seed ^ 0xdef))).unwrap();
            let (_, attn) = run_slot_attention(&f, &init, &p, 2).unwrap();
            attn.validate().unwrap();
        }
    }
}
