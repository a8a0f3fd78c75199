//! The bootstrap branch: a per-channel affine feature adaptation trained
//! against the fusion stage's own predicted masks.
//!
//! The branch owns a from-scratch slot module that is never touched by
//! gradients; it only drifts toward the fusion stage's slot module through
//! a weighted moving average once per step. The only learned tensors are
//! the adaptation's `scale` and `bias`: targets come from
//! `fusion::predict_masks`, predictions from the branch's own forward pass,
//! the two are matched by the Hungarian assignment on Dice costs, and the
//! matched cross-entropy drives the adaptation. At test time the adaptation
//! is composed with the fusion stage's slot module and fusion layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{FeatureMap, MaskStack, SlotModuleParams};
use crate::autodiff::{Graph, NodeId};
use crate::encoder::PatchEncoder;
use crate::error::{Error, Result};
use crate::fusion::{decode_g, predict_masks_untrained, FusionModel};
use crate::indicator::IndicatorModel;
use crate::matching::{hungarian, matching_cost, MatchingResult};
use crate::metrics::SegmentationMask;
use crate::optim::{
    apply_step, moving_average, visit_prefixed, visit_prefixed_mut, Adam, ParamGroup,
    TrackedLeaves,
};
use crate::scene::{Image, SceneSample};
use crate::tensor::{derive_seed, Tensor};

/// Per-channel affine map over encoder features: `out = scale ⊙ z + bias`.
/// Initialized to the identity so the branch starts exactly at the frozen
/// encoder's features.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveLayer {
    pub scale: Tensor, // [1, D]
    pub bias: Tensor,  // [1, D]
}

impl AdaptiveLayer {
    pub fn identity(dim: usize) -> Self {
        AdaptiveLayer {
            scale: Tensor::ones(1, dim),
            bias: Tensor::zeros(1, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.cols()
    }
}

impl ParamGroup for AdaptiveLayer {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("scale", &self.scale);
        f("bias", &self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("scale", &mut self.scale);
        f("bias", &mut self.bias);
    }
}

/// Bootstrap-branch state: the adaptation plus the branch's own slot
/// module (structurally identical to the fusion stage's).
#[derive(Clone, Debug)]
pub struct BootstrapState {
    pub adaptive: AdaptiveLayer,
    pub branch_slots: SlotModuleParams,
    pub wma_momentum: f64,
}

impl BootstrapState {
    pub fn init(dim: usize, wma_momentum: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&wma_momentum) {
            return Err(Error::config(format!(
                "wma momentum must be in [0, 1], got {wma_momentum}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xb007));
        Ok(BootstrapState {
            adaptive: AdaptiveLayer::identity(dim),
            branch_slots: SlotModuleParams::new(dim, &mut rng),
            wma_momentum,
        })
    }
}

impl ParamGroup for BootstrapState {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_prefixed("adaptive", &self.adaptive, f);
        visit_prefixed("branch_slots", &self.branch_slots, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_prefixed_mut("adaptive", &mut self.adaptive, f);
        visit_prefixed_mut("branch_slots", &mut self.branch_slots, f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapSchedule {
    /// Train after the fusion stage has converged (default; deterministic).
    Sequential,
    /// Interleave one fusion step with every bootstrap step.
    Simultaneous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub wma_momentum: f64,
    pub seed: u64,
    pub schedule: BootstrapSchedule,
}

impl Default for BootstrapTrainConfig {
    fn default() -> Self {
        BootstrapTrainConfig {
            steps: 200,
            batch_size: 4,
            lr: 4e-4,
            wma_momentum: 0.99,
            seed: 3,
            schedule: BootstrapSchedule::Sequential,
        }
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// `out[i, j, c] = scale[c] * features[i, j, c] + bias[c]`.
pub fn adapt_features(features: &FeatureMap, layer: &AdaptiveLayer) -> Result<FeatureMap> {
    if features.dim() != layer.dim() {
        return Err(Error::config(format!(
            "adaptive layer dim {} != feature dim {}",
            layer.dim(),
            features.dim()
        )));
    }
    let mut out = features.values().clone();
    for n in 0..out.rows() {
        let row = out.row_mut(n);
        for (c, v) in row.iter_mut().enumerate() {
            *v = layer.scale.get(0, c) * *v + layer.bias.get(0, c);
        }
    }
    FeatureMap::new(features.height(), features.width(), out)
}

/// Graph form of [`adapt_features`] on a `[N, D]` feature node.
pub fn adapt_features_g(g: &mut Graph, features: NodeId, scale: NodeId, bias: NodeId) -> NodeId {
    let scaled = g.mul_row(features, scale);
    g.add_row(scaled, bias)
}

/// Hungarian-matched pixel cross-entropy (graph form). `alpha_logits` is
/// `[N, K]`; each location's target label is relabeled to its matched
/// prediction channel; locations whose target region is unmatched are
/// excluded from the mean.
pub fn seg_loss_g(
    g: &mut Graph,
    alpha_logits: NodeId,
    target: &SegmentationMask,
    matching: &MatchingResult,
) -> Result<NodeId> {
    let (n, k) = g.value(alpha_logits).shape();
    if n != target.height() * target.width() {
        return Err(Error::input(format!(
            "alpha logits carry {n} locations but the target grid is {}x{}",
            target.height(),
            target.width()
        )));
    }
    let mut one_hot = Tensor::zeros(n, k);
    let mut matched = 0usize;
    for (loc, &label) in target.labels().iter().enumerate() {
        if let Some(channel) = matching.prediction_for(label as usize) {
            one_hot.set(loc, channel, 1.0);
            matched += 1;
        }
    }
    if matched == 0 {
        return Err(Error::input(
            "no location has a matched target region; segmentation loss undefined",
        ));
    }
    let targets = g.constant(&one_hot);
    let log_probs = g.log_softmax_rows(alpha_logits);
    let picked = g.mul(targets, log_probs);
    let total = g.sum_all(picked);
    let neg = g.neg(total);
    Ok(g.mul_scalar(neg, 1.0 / matched as f64))
}

/// Data-level [`seg_loss_g`].
pub fn seg_loss(
    alpha_logits: &Tensor,
    target: &SegmentationMask,
    matching: &MatchingResult,
) -> Result<f64> {
    let mut g = Graph::new();
    let logits = g.constant(alpha_logits);
    let loss = seg_loss_g(&mut g, logits, target, matching)?;
    Ok(g.value(loss).scalar_value())
}

/// WMA sync of the branch slot module toward the fusion stage's:
/// `branch <- m * branch + (1 - m) * fusion`.
pub fn wma_sync(
    state: &mut BootstrapState,
    fusion_slots: &SlotModuleParams,
    momentum: f64,
) -> Result<()> {
    moving_average(&mut state.branch_slots, fusion_slots, momentum)
}

/// Branch forward pass: frozen encode, adapt, slot attention with the
/// *branch* slot module, decode with the fusion stage's (frozen, shared)
/// decoder. Deterministic per `slot_seed`.
pub fn branch_predict(
    image: &Image,
    state: &BootstrapState,
    fusion: &FusionModel,
    encoder: &PatchEncoder,
    slot_seed: u64,
) -> Result<(SegmentationMask, MaskStack)> {
    let features = encoder.encode(image)?;
    let mut g = Graph::new();
    let out = branch_forward_g(&mut g, &features, state, fusion, slot_seed, false)?;
    let masks = MaskStack::from_location_major(
        features.height(),
        features.width(),
        g.value(out.alphas).clone(),
    )?;
    let labels = SegmentationMask::new(
        features.height(),
        features.width(),
        masks.argmax_labels(),
        None,
    )?;
    Ok((labels, masks))
}

struct BranchForward {
    alphas: NodeId,
    alpha_logits: NodeId,
    adaptive_ids: Vec<NodeId>,
}

fn branch_forward_g(
    g: &mut Graph,
    features: &FeatureMap,
    state: &BootstrapState,
    fusion: &FusionModel,
    slot_seed: u64,
    train_adaptive: bool,
) -> Result<BranchForward> {
    if features.dim() != state.adaptive.dim() {
        return Err(Error::config(format!(
            "adaptive layer dim {} != feature dim {}",
            state.adaptive.dim(),
            features.dim()
        )));
    }
    let feat = g.constant(features.values());
    let (scale, bias) = if train_adaptive {
        (g.leaf(&state.adaptive.scale), g.leaf(&state.adaptive.bias))
    } else {
        (
            g.constant(&state.adaptive.scale),
            g.constant(&state.adaptive.bias),
        )
    };
    let adapted = adapt_features_g(g, feat, scale, bias);
    let slot_nodes = state.branch_slots.nodes(g, false);
    let decoder_nodes = fusion.params.decoder.nodes(g, false);
    let mut rng = ChaCha8Rng::seed_from_u64(slot_seed);
    let noise = crate::attention::slot_noise(fusion.config.slots, features.dim(), &mut rng);
    let init = crate::attention::sample_slots_g(
        g,
        slot_nodes.init_mean,
        slot_nodes.init_log_std,
        &noise,
    );
    let (slots, _) = crate::attention::run_slot_attention_g(
        g,
        adapted,
        init,
        &slot_nodes.attn,
        fusion.config.slot_iters,
    );
    let decoded = decode_g(
        g,
        slots,
        &decoder_nodes,
        (features.height(), features.width()),
    );
    Ok(BranchForward {
        alphas: decoded.alphas,
        alpha_logits: decoded.alpha_logits,
        adaptive_ids: vec![scale, bias],
    })
}

/// One gradient step of the bootstrap branch over a batch: fusion targets,
/// WMA sync, branch forward, Hungarian matching, matched segmentation loss,
/// Adam update of the adaptation only. Returns the batch loss.
pub fn train_bootstrap_step(
    batch: &[&SceneSample],
    state: &mut BootstrapState,
    fusion: &FusionModel,
    indicator: Option<&IndicatorModel>,
    encoder: &PatchEncoder,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::input("bootstrap batch is empty"));
    }
    // (1) gradient-free targets from the fusion stage
    let mut targets = Vec::with_capacity(batch.len());
    let mut branch_seeds = Vec::with_capacity(batch.len());
    for sample in batch {
        let target_seed = rng.gen::<u64>();
        branch_seeds.push(rng.gen::<u64>());
        let features = encoder.encode(&sample.image)?;
        let (labels, _) = predict_masks_untrained(
            &sample.image,
            fusion,
            encoder,
            indicator,
            target_seed,
            &features,
        )?;
        targets.push(labels);
    }

    // (2) WMA sync of the branch slot module (the only way it ever moves)
    wma_sync(state, &fusion.params.slot_module, state.wma_momentum)?;

    // (3)-(5) branch forward, matching, matched CE
    let mut g = Graph::new();
    let mut adaptive_ids: Option<Vec<NodeId>> = None;
    let mut terms = Vec::with_capacity(batch.len());
    for (i, sample) in batch.iter().enumerate() {
        let features = encoder.encode(&sample.image)?;
        let fwd = match adaptive_ids.as_ref() {
            None => {
                let f = branch_forward_g(&mut g, &features, state, fusion, branch_seeds[i], true)?;
                adaptive_ids = Some(f.adaptive_ids.clone());
                f
            }
            Some(ids) => {
                // reuse the already-tracked adaptation leaves
                let mut f =
                    branch_forward_with_ids_g(&mut g, &features, state, fusion, branch_seeds[i], ids)?;
                f.adaptive_ids = ids.clone();
                f
            }
        };
        let masks = MaskStack::from_location_major(
            features.height(),
            features.width(),
            g.value(fwd.alphas).clone(),
        )?;
        let cost = matching_cost(&masks, &targets[i])?;
        let matching = hungarian(&cost)?;
        let loss = seg_loss_g(&mut g, fwd.alpha_logits, &targets[i], &matching)?;
        terms.push(loss);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    let total = g.mul_scalar(total, 1.0 / terms.len() as f64);

    // (6) gradient step on scale and bias only
    let grads = g.backward(total);
    let tracked = TrackedLeaves {
        ids: adaptive_ids.expect("batch is non-empty"),
    };
    let mut grad_list = tracked.grads(&g, &grads);
    apply_step(opt, &mut state.adaptive, &mut grad_list);

    let value = g.value(total).scalar_value();
    if !value.is_finite() {
        return Err(Error::Diverged(
            "bootstrap segmentation loss became non-finite".to_string(),
        ));
    }
    Ok(value)
}

fn branch_forward_with_ids_g(
    g: &mut Graph,
    features: &FeatureMap,
    state: &BootstrapState,
    fusion: &FusionModel,
    slot_seed: u64,
    adaptive_ids: &[NodeId],
) -> Result<BranchForward> {
    let feat = g.constant(features.values());
    let adapted = adapt_features_g(g, feat, adaptive_ids[0], adaptive_ids[1]);
    let slot_nodes = state.branch_slots.nodes(g, false);
    let decoder_nodes = fusion.params.decoder.nodes(g, false);
    let mut rng = ChaCha8Rng::seed_from_u64(slot_seed);
    let noise = crate::attention::slot_noise(fusion.config.slots, features.dim(), &mut rng);
    let init = crate::attention::sample_slots_g(
        g,
        slot_nodes.init_mean,
        slot_nodes.init_log_std,
        &noise,
    );
    let (slots, _) = crate::attention::run_slot_attention_g(
        g,
        adapted,
        init,
        &slot_nodes.attn,
        fusion.config.slot_iters,
    );
    let decoded = decode_g(
        g,
        slots,
        &decoder_nodes,
        (features.height(), features.width()),
    );
    Ok(BranchForward {
        alphas: decoded.alphas,
        alpha_logits: decoded.alpha_logits,
        adaptive_ids: adaptive_ids.to_vec(),
    })
}

/// Full bootstrap training. In sequential mode the fusion model is
/// read-only; in simultaneous mode each bootstrap step is preceded by one
/// fusion training step (both histories are deterministic per seed).
pub fn train_bootstrap(
    dataset: &[SceneSample],
    fusion: &mut FusionModel,
    indicator: Option<&IndicatorModel>,
    encoder: &PatchEncoder,
    config: &BootstrapTrainConfig,
) -> Result<(BootstrapState, Vec<(usize, f64)>)> {
    if dataset.is_empty() {
        return Err(Error::input("training dataset is empty"));
    }
    if fusion.trained_steps == 0 {
        return Err(Error::state(
            "bootstrap requires a trained fusion checkpoint",
        ));
    }
    let mut state = BootstrapState::init(encoder.dim(), config.wma_momentum, config.seed)?;
    let mut opt = Adam::new(config.lr);
    let mut fusion_opt = Adam::new(fusion.config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x5e65));
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        if config.schedule == BootstrapSchedule::Simultaneous {
            crate::fusion::fusion_step(dataset, indicator, encoder, fusion, &mut fusion_opt, &mut rng)?;
            fusion.trained_steps += 1;
        }
        let batch: Vec<&SceneSample> = (0..config.batch_size)
            .map(|_| &dataset[rng.gen_range(0..dataset.len())])
            .collect();
        let loss =
            train_bootstrap_step(&batch, &mut state, fusion, indicator, encoder, &mut opt, &mut rng)?;
        history.push((step, loss));
    }
    Ok((state, history))
}

/// The headline prediction path: frozen encode, learned adaptation, the
/// fusion stage's slot attention and fusion layer, decode, argmax.
pub fn inference_combined(
    image: &Image,
    adaptive: &AdaptiveLayer,
    fusion: &FusionModel,
    indicator: Option<&IndicatorModel>,
    encoder: &PatchEncoder,
    slot_seed: u64,
) -> Result<(SegmentationMask, MaskStack)> {
    if fusion.trained_steps == 0 {
        return Err(Error::state(
            "combined inference requires a trained fusion model",
        ));
    }
    let features = encoder.encode(image)?;
    let adapted = adapt_features(&features, adaptive)?;
    predict_masks_untrained(image, fusion, encoder, indicator, slot_seed, &adapted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionTrainConfig;
    use crate::gradcheck::{check_gradients, DEFAULT_STEP, DEFAULT_TOL};
    use crate::optim::param_hash;
    use crate::scene::{generate_scene, GeneratorConfig};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_fusion(dim: usize, fusion_enabled: bool) -> FusionModel {
        let mut m = FusionModel::init(
            dim,
            FusionTrainConfig {
                slots: 3,
                slot_iters: 2,
                fusion_enabled,
                ..FusionTrainConfig::default()
            },
        );
        m.trained_steps = 1; // composition tests exercise the forward path
        m
    }

    #[test]
    fn adapt_identity_and_constant_cases() {
        let mut r = rng(1);
        let features = FeatureMap::new(2, 2, Tensor::randn(4, 3, 1.0, &mut r)).unwrap();
        let id = AdaptiveLayer::identity(3);
        let out = adapt_features(&features, &id).unwrap();
        assert_eq!(out.values(), features.values());

        let constant = AdaptiveLayer {
            scale: Tensor::zeros(1, 3),
            bias: Tensor::from_vec(1, 3, vec![0.3, -0.5, 2.0]),
        };
        let out = adapt_features(&features, &constant).unwrap();
        for n in 0..4 {
            assert_eq!(out.values().row(n), &[0.3, -0.5, 2.0]);
        }

        let affine = AdaptiveLayer {
            scale: Tensor::filled(1, 3, 2.0),
            bias: Tensor::ones(1, 3),
        };
        let half = FeatureMap::new(1, 1, Tensor::filled(1, 3, 0.5)).unwrap();
        let out = adapt_features(&half, &affine).unwrap();
        assert_eq!(out.values().row(0), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn adapt_is_affine_linear() {
        // adapt(a z1 + b z2) = a adapt(z1) + b adapt(z2) - (a + b - 1) bias
        let mut r = rng(2);
        let layer = AdaptiveLayer {
            scale: Tensor::randn(1, 3, 1.0, &mut r),
            bias: Tensor::randn(1, 3, 1.0, &mut r),
        };
        let z1 = Tensor::randn(4, 3, 1.0, &mut r);
        let z2 = Tensor::randn(4, 3, 1.0, &mut r);
        let (a, b) = (0.7, -1.3);
        let mix = z1.scale(a).add(&z2.scale(b));
        let fm = |t: &Tensor| FeatureMap::new(2, 2, t.clone()).unwrap();
        let lhs = adapt_features(&fm(&mix), &layer).unwrap();
        let a1 = adapt_features(&fm(&z1), &layer).unwrap();
        let a2 = adapt_features(&fm(&z2), &layer).unwrap();
        for n in 0..4 {
            for c in 0..3 {
                let expect = a * a1.values().get(n, c) + b * a2.values().get(n, c)
                    - (a + b - 1.0) * layer.bias.get(0, c);
                assert!((lhs.values().get(n, c) - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn adapt_rejects_dim_mismatch() {
        let features = FeatureMap::new(1, 1, Tensor::zeros(1, 3)).unwrap();
        let layer = AdaptiveLayer::identity(4);
        assert!(matches!(
            adapt_features(&features, &layer),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn seg_loss_uniform_logits_is_ln_k() {
        let target = SegmentationMask::new(2, 2, vec![0, 1, 2, 0], None).unwrap();
        let matching = MatchingResult {
            assignment: vec![Some(0), Some(1), Some(2)],
            total_cost: 0.0,
        };
        let logits = Tensor::zeros(4, 3);
        let l = seg_loss(&logits, &target, &matching).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_vanishes_for_sharp_matched_predictions() {
        let target = SegmentationMask::new(1, 3, vec![0, 1, 1], None).unwrap();
        // channels swapped by the matching: target 0 -> channel 1
        let matching = MatchingResult {
            assignment: vec![Some(1), Some(0)],
            total_cost: 0.0,
        };
        let logits = Tensor::from_vec(3, 2, vec![-60.0, 60.0, 60.0, -60.0, 60.0, -60.0]);
        let l = seg_loss(&logits, &target, &matching).unwrap();
        assert!(l.abs() < 1e-9);
    }

    #[test]
    fn seg_loss_masks_out_unmatched_regions_and_matches_oracle() {
        let mut r = rng(3);
        let logits = Tensor::randn(9, 3, 1.0, &mut r);
        let labels: Vec<u32> = (0..9).map(|i| (i % 4) as u32).collect(); // label 3 unmatched
        let target = SegmentationMask::new(3, 3, labels.clone(), None).unwrap();
        let matching = MatchingResult {
            assignment: vec![Some(2), Some(0), Some(1), None],
            total_cost: 0.0,
        };
        let l = seg_loss(&logits, &target, &matching).unwrap();
        // scalar oracle with manual relabeling
        let mut expect = 0.0;
        let mut count = 0;
        for (loc, &lab) in labels.iter().enumerate() {
            let channel = match lab {
                0 => 2usize,
                1 => 0,
                2 => 1,
                _ => continue,
            };
            let row = logits.row(loc);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            expect -= row[channel] - lse;
            count += 1;
        }
        expect /= count as f64;
        assert!((l - expect).abs() < 1e-10, "{l} vs {expect}");
    }

    #[test]
    fn seg_loss_gradient_wrt_adaptation_matches_fd() {
        let mut r = rng(4);
        let dim = 3;
        let fusion = tiny_fusion(dim, false);
        let state = BootstrapState::init(dim, 0.99, 5).unwrap();
        let features = FeatureMap::new(2, 2, Tensor::randn(4, dim, 1.0, &mut r)).unwrap();
        let target = SegmentationMask::new(2, 2, vec![0, 1, 2, 1], None).unwrap();
        // fix the matching from the unperturbed forward pass so the FD probe
        // differentiates a fixed assignment
        let cost = {
            let mut g = Graph::new();
            let scale = g.constant(&state.adaptive.scale);
            let bias = g.constant(&state.adaptive.bias);
            let f = branch_forward_with_ids_g(&mut g, &features, &state, &fusion, 7, &[scale, bias])
                .unwrap();
            let m = MaskStack::from_location_major(2, 2, g.value(f.alphas).clone()).unwrap();
            matching_cost(&m, &target).unwrap()
        };
        let matching = hungarian(&cost).unwrap();
        check_gradients(
            |g, ids| {
                let f =
                    branch_forward_with_ids_g(g, &features, &state, &fusion, 7, &[ids[0], ids[1]])
                        .unwrap();
                seg_loss_g(g, f.alpha_logits, &target, &matching).unwrap()
            },
            &[state.adaptive.scale.clone(), state.adaptive.bias.clone()],
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
    }

    #[test]
    fn wma_endpoints() {
        let mut r = rng(6);
        let fusion_slots = SlotModuleParams::new(3, &mut r);
        let mut state = BootstrapState::init(3, 0.99, 7).unwrap();
        let before = state.branch_slots.clone();
        wma_sync(&mut state, &fusion_slots, 1.0).unwrap();
        assert_eq!(state.branch_slots, before);
        wma_sync(&mut state, &fusion_slots, 0.0).unwrap();
        assert_eq!(state.branch_slots, fusion_slots);
        // scalar case
        let mut s = BootstrapState::init(1, 0.9, 8).unwrap();
        s.branch_slots.init_mean = Tensor::scalar(1.0);
        let mut f = SlotModuleParams::new(1, &mut r);
        f.init_mean = Tensor::scalar(0.0);
        wma_sync(&mut s, &f, 0.9).unwrap();
        assert!((s.branch_slots.init_mean.scalar_value() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn identity_adaptation_with_synced_params_reproduces_fusion_path() {
        // branch slot module copied from fusion, identity adaptation: branch
        // prediction equals the no-fusion prediction of the fusion stage
        let dim = 64;
        let encoder = PatchEncoder::new(&crate::encoder::EncoderConfig::default()).unwrap();
        let fusion = tiny_fusion(dim, false);
        let mut state = BootstrapState::init(dim, 0.99, 9).unwrap();
        wma_sync(&mut state, &fusion.params.slot_module, 0.0).unwrap();
        let scene = generate_scene(&GeneratorConfig::default(), 0).unwrap();
        let (branch_labels, branch_masks) =
            branch_predict(&scene.image, &state, &fusion, &encoder, 123).unwrap();
        let (fusion_labels, fusion_masks) =
            crate::fusion::predict_masks(&scene.image, &fusion, &encoder, None, 123).unwrap();
        assert_eq!(branch_labels, fusion_labels);
        assert_eq!(
            branch_masks.location_major(),
            fusion_masks.location_major()
        );
    }

    #[test]
    fn identity_adaptation_makes_inference_combined_equal_fusion_prediction() {
        let dim = 64;
        let encoder = PatchEncoder::new(&crate::encoder::EncoderConfig::default()).unwrap();
        let fusion = tiny_fusion(dim, false);
        let adaptive = AdaptiveLayer::identity(dim);
        let scene = generate_scene(&GeneratorConfig::default(), 1).unwrap();
        let (combined, _) =
            inference_combined(&scene.image, &adaptive, &fusion, None, &encoder, 77).unwrap();
        let (plain, _) =
            crate::fusion::predict_masks(&scene.image, &fusion, &encoder, None, 77).unwrap();
        assert_eq!(combined, plain);
    }

    #[test]
    fn gradient_step_never_moves_branch_slot_params() {
        let dim = 64;
        let encoder = PatchEncoder::new(&crate::encoder::EncoderConfig::default()).unwrap();
        let fusion = tiny_fusion(dim, false);
        let mut state = BootstrapState::init(dim, 1.0, 10).unwrap(); // m=1: WMA is a no-op too
        let scene = generate_scene(&GeneratorConfig::default(), 2).unwrap();
        let mut opt = Adam::new(1e-3);
        let before_slots = param_hash(&state.branch_slots);
        let before_fusion = param_hash(&fusion.params);
        let before_adaptive = param_hash(&state.adaptive);
        let mut r = rng(11);
        train_bootstrap_step(
            &[&scene],
            &mut state,
            &fusion,
            None,
            &encoder,
            &mut opt,
            &mut r,
        )
        .unwrap();
        assert_eq!(param_hash(&state.branch_slots), before_slots);
        assert_eq!(param_hash(&fusion.params), before_fusion);
        assert_ne!(param_hash(&state.adaptive), before_adaptive);
    }

    #[test]
    fn zero_lr_and_unit_momentum_leave_state_unchanged() {
        let dim = 64;
        let encoder = PatchEncoder::new(&crate::encoder::EncoderConfig::default()).unwrap();
        let fusion = tiny_fusion(dim, false);
        let mut state = BootstrapState::init(dim, 1.0, 12).unwrap();
        let scene = generate_scene(&GeneratorConfig::default(), 3).unwrap();
        let mut opt = Adam::new(0.0);
        let before = param_hash(&state);
        let mut r = rng(13);
        for _ in 0..2 {
            train_bootstrap_step(
                &[&scene],
                &mut state,
                &fusion,
                None,
                &encoder,
                &mut opt,
                &mut r,
            )
            .unwrap();
        }
        assert_eq!(param_hash(&state), before);
    }
}
