//! The fusion stage: slot attention over frozen encoder features, optional
//! injection of the indicator's fg/bg vectors (cross-attention with the
//! slots as queries, then self-attention over the slots), and a
//! spatial-broadcast decoder that reconstructs the encoder features under
//! per-slot alpha compositing. Trained with feature-space MSE by Adam; the
//! encoder and the indicator are never touched.
//!
//! Both attention blocks start with zero output projections, so at
//! initialization `fuse_slots` is the identity on its slots and the stage
//! degenerates to the plain slot-attention pipeline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    cross_attention_g, run_slot_attention_g, sample_slots_g, self_attention_g, slot_noise,
    AttentionNodes, AttentionParams, FeatureMap, MaskStack, SlotAttentionNodes, SlotModuleParams,
    SlotSet,
};
use crate::autodiff::{Graph, NodeId};
use crate::encoder::{sinusoidal_position_codes, PatchEncoder};
use crate::error::{Error, Result};
use crate::indicator::{predict_fg_bg, IndicatorModel};
use crate::metrics::SegmentationMask;
use crate::optim::{apply_step, visit_prefixed, visit_prefixed_mut, Adam, ParamGroup, TrackedLeaves};
use crate::scene::{Image, SceneSample};
use crate::tensor::{derive_seed, Tensor};

/// Per-slot spatial-broadcast decoder: one hidden tanh layer, output is
/// `dim` feature channels plus one alpha logit.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub w1: Tensor, // [D, H]
    pub b1: Tensor, // [1, H]
    pub w2: Tensor, // [H, D+1]
    pub b2: Tensor, // [1, D+1]
}

impl DecoderParams {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = 2 * dim;
        DecoderParams {
            w1: Tensor::randn(dim, hidden, 1.0 / (dim as f64).sqrt(), rng),
            b1: Tensor::zeros(1, hidden),
            w2: Tensor::randn(hidden, dim + 1, 1.0 / (hidden as f64).sqrt(), rng),
            b2: Tensor::zeros(1, dim + 1),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }
}

impl ParamGroup for DecoderParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w1", &self.w1);
        f("b1", &self.b1);
        f("w2", &self.w2);
        f("b2", &self.b2);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w1", &mut self.w1);
        f("b1", &mut self.b1);
        f("w2", &mut self.w2);
        f("b2", &mut self.b2);
    }
}

#[derive(Clone, Copy)]
pub struct DecoderNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl DecoderParams {
    pub fn nodes(&self, g: &mut Graph, trainable: bool) -> DecoderNodes {
        let mut reg = |t: &Tensor| if trainable { g.leaf(t) } else { g.constant(t) };
        DecoderNodes {
            w1: reg(&self.w1),
            b1: reg(&self.b1),
            w2: reg(&self.w2),
            b2: reg(&self.b2),
        }
    }
}

impl DecoderNodes {
    pub fn id_list(&self) -> Vec<NodeId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

#[derive(Clone, Copy)]
pub struct SlotModuleNodes {
    pub init_mean: NodeId,
    pub init_log_std: NodeId,
    pub attn: SlotAttentionNodes,
}

impl SlotModuleParams {
    pub fn nodes(&self, g: &mut Graph, trainable: bool) -> SlotModuleNodes {
        let (init_mean, init_log_std) = if trainable {
            (g.leaf(&self.init_mean), g.leaf(&self.init_log_std))
        } else {
            (g.constant(&self.init_mean), g.constant(&self.init_log_std))
        };
        SlotModuleNodes {
            init_mean,
            init_log_std,
            attn: self.attn.nodes(g, trainable),
        }
    }
}

impl SlotModuleNodes {
    pub fn id_list(&self) -> Vec<NodeId> {
        let mut ids = vec![self.init_mean, self.init_log_std];
        ids.extend(self.attn.id_list());
        ids
    }
}

/// All trainable state of the fusion stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub slot_module: SlotModuleParams,
    pub cross: AttentionParams,
    pub self_attn: AttentionParams,
    pub decoder: DecoderParams,
}

impl FusionParams {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        FusionParams {
            slot_module: SlotModuleParams::new(dim, rng),
            cross: AttentionParams::new_residual_identity(dim, rng),
            self_attn: AttentionParams::new_residual_identity(dim, rng),
            decoder: DecoderParams::new(dim, rng),
        }
    }
}

impl ParamGroup for FusionParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_prefixed("slot_module", &self.slot_module, f);
        visit_prefixed("cross", &self.cross, f);
        visit_prefixed("self_attn", &self.self_attn, f);
        visit_prefixed("decoder", &self.decoder, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_prefixed_mut("slot_module", &mut self.slot_module, f);
        visit_prefixed_mut("cross", &mut self.cross, f);
        visit_prefixed_mut("self_attn", &mut self.self_attn, f);
        visit_prefixed_mut("decoder", &mut self.decoder, f);
    }
}

pub struct FusionNodes {
    pub slot_module: SlotModuleNodes,
    pub cross: AttentionNodes,
    pub self_attn: AttentionNodes,
    pub decoder: DecoderNodes,
}

impl FusionParams {
    pub fn nodes(&self, g: &mut Graph, trainable: bool) -> FusionNodes {
        FusionNodes {
            slot_module: self.slot_module.nodes(g, trainable),
            cross: self.cross.nodes(g, trainable),
            self_attn: self.self_attn.nodes(g, trainable),
            decoder: self.decoder.nodes(g, trainable),
        }
    }
}

impl FusionNodes {
    pub fn id_list(&self) -> Vec<NodeId> {
        let mut ids = self.slot_module.id_list();
        ids.extend(self.cross.id_list());
        ids.extend(self.self_attn.id_list());
        ids.extend(self.decoder.id_list());
        ids
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionTrainConfig {
    pub slots: usize,
    pub slot_iters: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// `false` trains the plain slot-attention baseline (no indicator
    /// input); `true` trains the full fusion stage.
    pub fusion_enabled: bool,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        FusionTrainConfig {
            slots: 5,
            slot_iters: 3,
            steps: 600,
            batch_size: 4,
            lr: 4e-4,
            seed: 2,
            fusion_enabled: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    pub params: FusionParams,
    pub config: FusionTrainConfig,
    pub trained_steps: usize,
}

impl FusionModel {
    pub fn init(dim: usize, config: FusionTrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xf051));
        FusionModel {
            params: FusionParams::new(dim, &mut rng),
            config,
            trained_steps: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.params.decoder.dim()
    }
}

impl ParamGroup for FusionModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.params.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.params.visit_mut(f);
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Cross-attention of slots (queries) against the indicator's fg/bg vectors
/// (keys/values), then self-attention over the result.
pub fn fuse_slots(
    slots: &SlotSet,
    fgbg: &SlotSet,
    cross: &AttentionParams,
    self_attn: &AttentionParams,
) -> Result<SlotSet> {
    if fgbg.count() != 2 {
        return Err(Error::config("fusion inputs must be the two fg/bg vectors"));
    }
    if slots.dim() != fgbg.dim() || slots.dim() != cross.dim() || slots.dim() != self_attn.dim() {
        return Err(Error::config(format!(
            "fusion dims mismatch: slots {}, fgbg {}, cross {}, self {}",
            slots.dim(),
            fgbg.dim(),
            cross.dim(),
            self_attn.dim()
        )));
    }
    let mut g = Graph::new();
    let s = g.constant(slots.vectors());
    let f = g.constant(fgbg.vectors());
    let cross_nodes = cross.nodes(&mut g, false);
    let self_nodes = self_attn.nodes(&mut g, false);
    let out = fuse_slots_g(&mut g, s, f, &cross_nodes, &self_nodes);
    SlotSet::new(g.value(out).clone())
}

pub fn fuse_slots_g(
    g: &mut Graph,
    slots: NodeId,
    fgbg: NodeId,
    cross: &AttentionNodes,
    self_attn: &AttentionNodes,
) -> NodeId {
    let crossed = cross_attention_g(g, slots, fgbg, cross);
    self_attention_g(g, crossed, self_attn)
}

/// Spatial-broadcast decode of a slot set onto an `(h, w)` grid: each slot
/// is broadcast over the grid, offset by fixed position codes, run through
/// the per-location perceptron, and alpha-composited across slots.
pub fn decode(
    fused: &SlotSet,
    decoder: &DecoderParams,
    target_shape: (usize, usize),
) -> Result<(FeatureMap, MaskStack)> {
    if fused.dim() != decoder.dim() {
        return Err(Error::config(format!(
            "decoder dim {} != slot dim {}",
            decoder.dim(),
            fused.dim()
        )));
    }
    let mut g = Graph::new();
    let s = g.constant(fused.vectors());
    let nodes = decoder.nodes(&mut g, false);
    let out = decode_g(&mut g, s, &nodes, target_shape);
    let recon = FeatureMap::new(target_shape.0, target_shape.1, g.value(out.recon).clone())?;
    let masks =
        MaskStack::from_location_major(target_shape.0, target_shape.1, g.value(out.alphas).clone())?;
    Ok((recon, masks))
}

pub struct DecodeOut {
    pub recon: NodeId,        // [N, D]
    pub alphas: NodeId,       // [N, K]
    pub alpha_logits: NodeId, // [N, K]
}

pub fn decode_g(
    g: &mut Graph,
    fused: NodeId,
    decoder: &DecoderNodes,
    target_shape: (usize, usize),
) -> DecodeOut {
    let (h, w) = target_shape;
    let n = h * w;
    let k = g.value(fused).rows();
    let dim = g.value(fused).cols();
    let pos = g.constant(&sinusoidal_position_codes(n, dim));

    let mut feats = Vec::with_capacity(k);
    let mut logits = Vec::with_capacity(k);
    for slot in 0..k {
        let s = g.slice_rows(fused, slot, slot + 1); // [1, D]
        let grid = g.broadcast_rows(s, n); // [N, D]
        let grid = g.add(grid, pos);
        let h1 = g.matmul(grid, decoder.w1);
        let h1 = g.add_row(h1, decoder.b1);
        let h1 = g.tanh(h1);
        let out = g.matmul(h1, decoder.w2);
        let out = g.add_row(out, decoder.b2); // [N, D+1]
        feats.push(g.slice_cols(out, 0, dim));
        logits.push(g.slice_cols(out, dim, dim + 1));
    }
    let alpha_logits = g.concat_cols(&logits); // [N, K]
    let alphas = g.softmax_rows(alpha_logits);
    let mut recon = None;
    for (slot, &f) in feats.iter().enumerate() {
        let a = g.slice_cols(alphas, slot, slot + 1); // [N, 1]
        let weighted = g.mul_col(f, a);
        recon = Some(match recon {
            None => weighted,
            Some(acc) => g.add(acc, weighted),
        });
    }
    DecodeOut {
        recon: recon.expect("at least one slot"),
        alphas,
        alpha_logits,
    }
}

/// Mean squared error over all locations and channels.
pub fn reconstruction_loss(reconstruction: &FeatureMap, target: &FeatureMap) -> Result<f64> {
    if reconstruction.values().shape() != target.values().shape() {
        return Err(Error::input(format!(
            "reconstruction shape {:?} != target {:?}",
            reconstruction.values().shape(),
            target.values().shape()
        )));
    }
    let mut g = Graph::new();
    let r = g.constant(reconstruction.values());
    let t = g.constant(target.values());
    let loss = reconstruction_loss_g(&mut g, r, t);
    Ok(g.value(loss).scalar_value())
}

pub fn reconstruction_loss_g(g: &mut Graph, reconstruction: NodeId, target: NodeId) -> NodeId {
    let diff = g.sub(reconstruction, target);
    let sq = g.mul(diff, diff);
    g.mean_all(sq)
}

// ---------------------------------------------------------------------------
// Forward / inference
// ---------------------------------------------------------------------------

pub struct FusionForward {
    pub slots: NodeId,
    pub fused: NodeId,
    pub decode: DecodeOut,
}

/// Shared forward pass: slot attention over (already adapted) features,
/// optional fusion with fg/bg vectors, then decode. `features` and `fgbg`
/// enter as graph nodes so callers control differentiability.
pub fn fusion_forward_g(
    g: &mut Graph,
    features: NodeId,
    grid: (usize, usize),
    nodes: &FusionNodes,
    fgbg: Option<NodeId>,
    slots_count: usize,
    slot_iters: usize,
    noise: &Tensor,
) -> FusionForward {
    let init = sample_slots_g(g, nodes.slot_module.init_mean, nodes.slot_module.init_log_std, noise);
    let (slots, _attn) =
        run_slot_attention_g(g, features, init, &nodes.slot_module.attn, slot_iters);
    debug_assert_eq!(noise.rows(), slots_count);
    let fused = match fgbg {
        Some(f) => fuse_slots_g(g, slots, f, &nodes.cross, &nodes.self_attn),
        None => slots,
    };
    let decode = decode_g(g, fused, &nodes.decoder, grid);
    FusionForward {
        slots,
        fused,
        decode,
    }
}

/// Full forward pass on one image; hard labels are the per-location argmax
/// over decoder alphas. Deterministic for a fixed `slot_seed`.
pub fn predict_masks(
    image: &Image,
    model: &FusionModel,
    encoder: &PatchEncoder,
    indicator: Option<&IndicatorModel>,
    slot_seed: u64,
) -> Result<(SegmentationMask, MaskStack)> {
    if model.trained_steps == 0 {
        return Err(Error::state(
            "fusion model has not been trained; run train_contextfusion first",
        ));
    }
    let features = encoder.encode(image)?;
    predict_masks_untrained(image, model, encoder, indicator, slot_seed, &features)
}

/// The same forward pass without the trained-state guard; used internally
/// by training (targets early in simultaneous mode) and by composition
/// tests.
pub fn predict_masks_untrained(
    image: &Image,
    model: &FusionModel,
    encoder: &PatchEncoder,
    indicator: Option<&IndicatorModel>,
    slot_seed: u64,
    features: &FeatureMap,
) -> Result<(SegmentationMask, MaskStack)> {
    let fgbg = match (model.config.fusion_enabled, indicator) {
        (true, Some(ind)) => Some(predict_fg_bg(image, ind, encoder)?.1),
        (true, None) => {
            return Err(Error::state(
                "fusion stage requires a trained indicator model",
            ))
        }
        (false, _) => None,
    };
    let mut g = Graph::new();
    let nodes = model.params.nodes(&mut g, false);
    let feat = g.constant(features.values());
    let fgbg_node = fgbg.as_ref().map(|f| g.constant(f.vectors()));
    let mut rng = ChaCha8Rng::seed_from_u64(slot_seed);
    let noise = slot_noise(model.config.slots, model.dim(), &mut rng);
    let fwd = fusion_forward_g(
        &mut g,
        feat,
        (features.height(), features.width()),
        &nodes,
        fgbg_node,
        model.config.slots,
        model.config.slot_iters,
        &noise,
    );
    let masks = MaskStack::from_location_major(
        features.height(),
        features.width(),
        g.value(fwd.decode.alphas).clone(),
    )?;
    let labels = SegmentationMask::new(
        features.height(),
        features.width(),
        masks.argmax_labels(),
        None,
    )?;
    Ok((labels, masks))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Train the stage with Adam on slot-attention, fusion, and decoder
/// parameters; the encoder and indicator stay frozen. Returns the model and
/// the per-step reconstruction-loss history.
pub fn train_contextfusion(
    dataset: &[SceneSample],
    indicator: Option<&IndicatorModel>,
    encoder: &PatchEncoder,
    config: &FusionTrainConfig,
) -> Result<(FusionModel, Vec<(usize, f64)>)> {
    if dataset.is_empty() {
        return Err(Error::input("training dataset is empty"));
    }
    if config.fusion_enabled && indicator.is_none() {
        return Err(Error::state(
            "fusion stage requires a trained indicator model",
        ));
    }
    let mut model = FusionModel::init(encoder.dim(), config.clone());
    let mut opt = Adam::new(config.lr);
    let mut history = Vec::with_capacity(config.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xf5ea));
    for step in 0..config.steps {
        let loss = fusion_step(dataset, indicator, encoder, &mut model, &mut opt, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "reconstruction loss became non-finite at step {step}"
            )));
        }
        history.push((step, loss));
        model.trained_steps = step + 1;
    }
    Ok((model, history))
}

/// One Adam step over a batch; returns the batch reconstruction loss.
pub fn fusion_step(
    dataset: &[SceneSample],
    indicator: Option<&IndicatorModel>,
    encoder: &PatchEncoder,
    model: &mut FusionModel,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    use rand::Rng as _;
    let cfg = model.config.clone();
    let mut g = Graph::new();
    let nodes = model.params.nodes(&mut g, true);
    let tracked = TrackedLeaves {
        ids: nodes.id_list(),
    };
    let mut terms = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let sample = &dataset[rng.gen_range(0..dataset.len())];
        let features = encoder.encode(&sample.image)?;
        let feat = g.constant(features.values());
        let fgbg_node = if cfg.fusion_enabled {
            let ind = indicator.expect("checked by train_contextfusion");
            let (_, vectors) = predict_fg_bg(&sample.image, ind, encoder)?;
            Some(g.constant(vectors.vectors()))
        } else {
            None
        };
        let noise = slot_noise(cfg.slots, encoder.dim(), rng);
        let fwd = fusion_forward_g(
            &mut g,
            feat,
            (features.height(), features.width()),
            &nodes,
            fgbg_node,
            cfg.slots,
            cfg.slot_iters,
            &noise,
        );
        let loss = reconstruction_loss_g(&mut g, fwd.decode.recon, feat);
        terms.push(loss);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    let total = g.mul_scalar(total, 1.0 / terms.len() as f64);
    let grads = g.backward(total);
    let mut grad_list = tracked.grads(&g, &grads);
    apply_step(opt, &mut model.params, &mut grad_list);
    Ok(g.value(total).scalar_value())
}
