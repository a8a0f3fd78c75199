//! End-to-end orchestration: dataset splits, stage training with
//! checkpoints, evaluation across ablation variants, and figure rendering.
//! The CLI is a thin shell over this module; the acceptance suite drives it
//! in memory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::attention::MaskStack;
use crate::bootstrap::{
    inference_combined, train_bootstrap, AdaptiveLayer, BootstrapState,
};
use crate::checkpoint;
use crate::config::PipelineConfig;
use crate::encoder::PatchEncoder;
use crate::error::{Error, Result};
use crate::fusion::{predict_masks, train_contextfusion, FusionModel, FusionTrainConfig};
use crate::indicator::{
    predict_fg_bg, train_indicator, IndicatorLossRecord, IndicatorModel,
};
use crate::metrics::{binary_fg_iou, mbo, miou_hungarian, SegmentationMask};
use crate::scene::{Image, SceneSample};
use crate::tensor::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Generate a split in memory. Train and validation samples use disjoint
/// index ranges of the same generator stream, so the splits never overlap.
pub fn generate_split(config: &PipelineConfig, split: Split, workers: usize) -> Result<Vec<SceneSample>> {
    let (offset, count) = match split {
        Split::Train => (0, config.data.train_count),
        Split::Val => (config.data.train_count, config.data.val_count),
    };
    let mut cfg = config.data.generator.clone();
    // offset by reindexing: generate_scenes numbers from 0, so shift indices
    let samples = (offset as u64..(offset + count) as u64)
        .collect::<Vec<_>>();
    if workers <= 1 || count < 2 {
        return samples
            .into_iter()
            .map(|i| crate::scene::generate_scene(&cfg, i))
            .collect();
    }
    // reuse the parallel path by generating the contiguous prefix and
    // slicing would waste work; chunk the explicit index list instead
    let worker_count = workers.min(count.max(1));
    let mut results: Vec<Option<Result<SceneSample>>> = (0..count).map(|_| None).collect();
    let chunk = count.div_ceil(worker_count);
    let cfg_ref = &mut cfg;
    std::thread::scope(|scope| {
        let cfg: &crate::scene::GeneratorConfig = cfg_ref;
        let mut rest: &mut [Option<Result<SceneSample>>] = &mut results;
        let mut start = 0usize;
        while !rest.is_empty() {
            let take = chunk.min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            rest = tail;
            let base = offset + start;
            scope.spawn(move || {
                for (off, slot) in head.iter_mut().enumerate() {
                    *slot = Some(crate::scene::generate_scene(cfg, (base + off) as u64));
                }
            });
            start += take;
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("all slots filled"))
        .collect()
}

pub fn split_dir(config: &PipelineConfig, split: Split) -> PathBuf {
    match split {
        Split::Train => config.dataset_dir().join("train"),
        Split::Val => config.dataset_dir().join("val"),
    }
}

/// Write both splits to `out_dir/dataset/{train,val}`.
pub fn write_dataset_to_disk(config: &PipelineConfig, workers: usize) -> Result<(usize, usize)> {
    for (split, count) in [
        (Split::Train, config.data.train_count),
        (Split::Val, config.data.val_count),
    ] {
        let samples = generate_split(config, split, workers)?;
        let dir = split_dir(config, split);
        write_samples(&dir, &config.data.generator, &samples)?;
        debug_assert_eq!(samples.len(), count);
    }
    Ok((config.data.train_count, config.data.val_count))
}

fn write_samples(
    dir: &Path,
    gen_cfg: &crate::scene::GeneratorConfig,
    samples: &[SceneSample],
) -> Result<()> {
    // scene::write_dataset regenerates; write the already-generated samples
    // through the same layout by delegating to the low-level writers
    crate::scene::write_prepared_dataset(dir, gen_cfg, samples)
}

/// Load one split from disk with an actionable error if it is missing.
pub fn load_split(config: &PipelineConfig, split: Split) -> Result<Vec<SceneSample>> {
    let dir = split_dir(config, split);
    let samples = crate::scene::load_dataset(&dir)?;
    if samples.is_empty() {
        return Err(Error::state(format!(
            "no dataset at {}; run `slotforge gen-data --config <config>` first",
            dir.display()
        )));
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Stage training with checkpoints
// ---------------------------------------------------------------------------

pub fn build_encoder(config: &PipelineConfig) -> Result<PatchEncoder> {
    PatchEncoder::new(&config.encoder)
}

pub fn train_indicator_stage(
    config: &PipelineConfig,
    train: &[SceneSample],
) -> Result<(IndicatorModel, Vec<IndicatorLossRecord>)> {
    let encoder = build_encoder(config)?;
    train_indicator(train, &encoder, &config.indicator)
}

/// Train either the plain baseline (`fusion_enabled = false`) or the fusion
/// stage. Both variants share the stage seed so their slot modules start
/// identically and the comparison isolates the fusion pathway.
pub fn train_stage_variant(
    config: &PipelineConfig,
    fusion_enabled: bool,
    train: &[SceneSample],
    indicator: Option<&IndicatorModel>,
) -> Result<(FusionModel, Vec<(usize, f64)>)> {
    let encoder = build_encoder(config)?;
    let stage_cfg = FusionTrainConfig {
        slots: config.slots,
        fusion_enabled,
        ..config.fusion.clone()
    };
    train_contextfusion(train, indicator, &encoder, &stage_cfg)
}

pub fn train_bootstrap_stage(
    config: &PipelineConfig,
    train: &[SceneSample],
    fusion: &mut FusionModel,
    indicator: Option<&IndicatorModel>,
) -> Result<(BootstrapState, Vec<(usize, f64)>)> {
    let encoder = build_encoder(config)?;
    train_bootstrap(train, fusion, indicator, &encoder, &config.bootstrap)
}

pub fn save_indicator(config: &PipelineConfig, model: &IndicatorModel) -> Result<()> {
    checkpoint::save(
        &config.checkpoint_dir("indicator"),
        "indicator",
        &config.hash(),
        model.trained_steps,
        serde_json::to_value(&model.config).expect("config serializes"),
        model,
    )
}

pub fn load_indicator(config: &PipelineConfig) -> Result<IndicatorModel> {
    let ckpt = checkpoint::load(&config.checkpoint_dir("indicator"))?;
    if ckpt.kind != "indicator" {
        return Err(Error::Checkpoint(format!(
            "expected an indicator checkpoint, found '{}'",
            ckpt.kind
        )));
    }
    let train_cfg = ckpt.meta_as()?;
    let mut model = IndicatorModel::init(config.encoder.dim, train_cfg);
    ckpt.apply(&mut model)?;
    model.trained_steps = ckpt.trained_steps;
    Ok(model)
}

pub fn save_stage(config: &PipelineConfig, kind: &str, model: &FusionModel) -> Result<()> {
    checkpoint::save(
        &config.checkpoint_dir(kind),
        kind,
        &config.hash(),
        model.trained_steps,
        serde_json::to_value(&model.config).expect("config serializes"),
        &model.params,
    )
}

pub fn load_stage(config: &PipelineConfig, kind: &str) -> Result<FusionModel> {
    let ckpt = checkpoint::load(&config.checkpoint_dir(kind))?;
    if ckpt.kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected a '{kind}' checkpoint, found '{}'",
            ckpt.kind
        )));
    }
    let stage_cfg: FusionTrainConfig = ckpt.meta_as()?;
    let mut model = FusionModel::init(config.encoder.dim, stage_cfg);
    ckpt.apply(&mut model.params)?;
    model.trained_steps = ckpt.trained_steps;
    Ok(model)
}

pub fn save_bootstrap(config: &PipelineConfig, state: &BootstrapState) -> Result<()> {
    checkpoint::save(
        &config.checkpoint_dir("bootstrap"),
        "bootstrap",
        &config.hash(),
        1,
        serde_json::json!({ "wma_momentum": state.wma_momentum }),
        state,
    )
}

pub fn load_bootstrap(config: &PipelineConfig) -> Result<BootstrapState> {
    let ckpt = checkpoint::load(&config.checkpoint_dir("bootstrap"))?;
    if ckpt.kind != "bootstrap" {
        return Err(Error::Checkpoint(format!(
            "expected a bootstrap checkpoint, found '{}'",
            ckpt.kind
        )));
    }
    let momentum = ckpt
        .meta
        .get("wma_momentum")
        .and_then(|v| v.as_f64())
        .unwrap_or(0.99);
    let mut state = BootstrapState::init(config.encoder.dim, momentum, 0)?;
    ckpt.apply(&mut state)?;
    Ok(state)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Base,
    Fusion,
    Full,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Fusion => "fusion",
            Variant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "fusion" => Ok(Variant::Fusion),
            "full" => Ok(Variant::Full),
            other => Err(Error::input(format!(
                "unknown variant '{other}' (expected base, fusion, or full)"
            ))),
        }
    }
}

/// Everything evaluation may need; variants that miss their model are
/// reported as state errors naming the missing artifact.
pub struct EvalStack<'a> {
    pub encoder: &'a PatchEncoder,
    pub indicator: Option<&'a IndicatorModel>,
    pub base: Option<&'a FusionModel>,
    pub fusion: Option<&'a FusionModel>,
    pub adaptive: Option<&'a AdaptiveLayer>,
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub variant: &'static str,
    pub image: u64,
    pub mbo_i: f64,
    pub mbo_c: f64,
    pub miou: f64,
    /// Binary fg/bg IoU of the indicator consumed by this variant; absent
    /// for the plain baseline, which has no indicator in its path.
    pub fg_iou: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct EvalAggregate {
    pub variant: &'static str,
    pub images: usize,
    pub mbo_i: f64,
    pub mbo_c: f64,
    pub miou: f64,
    pub fg_iou: Option<f64>,
}

fn predict_for_variant(
    variant: Variant,
    sample: &SceneSample,
    stack: &EvalStack<'_>,
    slot_seed: u64,
) -> Result<(SegmentationMask, MaskStack)> {
    match variant {
        Variant::Base => {
            let base = stack.base.ok_or_else(|| {
                Error::state("base variant requires the base checkpoint (train-fusion --variant base)")
            })?;
            predict_masks(&sample.image, base, stack.encoder, None, slot_seed)
        }
        Variant::Fusion => {
            let fusion = stack.fusion.ok_or_else(|| {
                Error::state("fusion variant requires the fusion checkpoint (train-fusion)")
            })?;
            predict_masks(
                &sample.image,
                fusion,
                stack.encoder,
                stack.indicator,
                slot_seed,
            )
        }
        Variant::Full => {
            let fusion = stack.fusion.ok_or_else(|| {
                Error::state("full variant requires the fusion checkpoint (train-fusion)")
            })?;
            let adaptive = stack.adaptive.ok_or_else(|| {
                Error::state("full variant requires the bootstrap checkpoint (train-bootstrap)")
            })?;
            inference_combined(
                &sample.image,
                adaptive,
                fusion,
                stack.indicator,
                stack.encoder,
                slot_seed,
            )
        }
    }
}

/// Per-image metrics for the requested variants; predictions are upsampled
/// to image resolution before scoring.
pub fn evaluate(
    samples: &[SceneSample],
    stack: &EvalStack<'_>,
    variants: &[Variant],
    eval_slot_seed: u64,
) -> Result<(Vec<EvalRow>, Vec<EvalAggregate>)> {
    let patch = stack.encoder.patch();
    let mut rows = Vec::with_capacity(samples.len() * variants.len());
    for &variant in variants {
        for sample in samples {
            let slot_seed = derive_seed(eval_slot_seed, sample.index);
            let (labels, _) = predict_for_variant(variant, sample, stack, slot_seed)?;
            let pred = labels.upsample(patch);
            let gt_inst = &sample.instance_masks;
            let gt_cat = sample.category_mask();
            let fg_iou = match (variant, stack.indicator) {
                (Variant::Base, _) | (_, None) => None,
                (_, Some(ind)) => {
                    let (mask, _) = predict_fg_bg(&sample.image, ind, stack.encoder)?;
                    Some(binary_fg_iou(&mask.upsample(patch), &sample.fgbg_mask)?)
                }
            };
            rows.push(EvalRow {
                variant: variant.as_str(),
                image: sample.index,
                mbo_i: mbo(&pred, gt_inst)?,
                mbo_c: mbo(&pred, &gt_cat)?,
                miou: miou_hungarian(&pred, gt_inst)?,
                fg_iou,
            });
        }
    }
    let aggregates = aggregate(&rows, variants);
    Ok((rows, aggregates))
}

fn aggregate(rows: &[EvalRow], variants: &[Variant]) -> Vec<EvalAggregate> {
    variants
        .iter()
        .map(|v| {
            let vs: Vec<&EvalRow> = rows.iter().filter(|r| r.variant == v.as_str()).collect();
            let n = vs.len().max(1) as f64;
            let fg: Vec<f64> = vs.iter().filter_map(|r| r.fg_iou).collect();
            EvalAggregate {
                variant: v.as_str(),
                images: vs.len(),
                mbo_i: vs.iter().map(|r| r.mbo_i).sum::<f64>() / n,
                mbo_c: vs.iter().map(|r| r.mbo_c).sum::<f64>() / n,
                miou: vs.iter().map(|r| r.miou).sum::<f64>() / n,
                fg_iou: if fg.is_empty() {
                    None
                } else {
                    Some(fg.iter().sum::<f64>() / fg.len() as f64)
                },
            }
        })
        .collect()
}

/// Mean per-image binary fg/bg IoU of the indicator on a sample set.
pub fn indicator_binary_iou(
    samples: &[SceneSample],
    indicator: &IndicatorModel,
    encoder: &PatchEncoder,
) -> Result<f64> {
    let patch = encoder.patch();
    let mut total = 0.0;
    for sample in samples {
        let (mask, _) = predict_fg_bg(&sample.image, indicator, encoder)?;
        total += binary_fg_iou(&mask.upsample(patch), &sample.fgbg_mask)?;
    }
    Ok(total / samples.len() as f64)
}

// ---------------------------------------------------------------------------
// CSV / figure output
// ---------------------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// `step,pixel,stuff,sep,total` with the config hash in a comment line.
pub fn write_indicator_loss_csv(
    path: &Path,
    config_hash: &str,
    history: &[IndicatorLossRecord],
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# config_hash={config_hash}\n"));
    out.push_str("step,pixel,stuff,sep,total\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.step, r.pixel, r.stuff, r.sep, r.total
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `step,loss` history for the fusion / bootstrap stages.
pub fn write_loss_csv(path: &Path, config_hash: &str, history: &[(usize, f64)]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# config_hash={config_hash}\n"));
    out.push_str("step,loss\n");
    for (step, loss) in history {
        out.push_str(&format!("{step},{loss:.6}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-image rows followed by per-variant mean rows. Conventions noted in
/// the header: mBO/mIoU average over non-background ground-truth regions,
/// per image first, then over the dataset.
pub fn write_eval_csv(
    path: &Path,
    config_hash: &str,
    rows: &[EvalRow],
    aggregates: &[EvalAggregate],
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("# config_hash={config_hash}\n"));
    out.push_str("# conventions: gt background excluded; per-image mean, then dataset mean\n");
    out.push_str("variant,image,mbo_i,mbo_c,miou,fg_iou\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{}\n",
            r.variant,
            r.image,
            r.mbo_i,
            r.mbo_c,
            r.miou,
            fmt_opt(r.fg_iou)
        ));
    }
    for a in aggregates {
        out.push_str(&format!(
            "{},mean,{:.6},{:.6},{:.6},{}\n",
            a.variant,
            a.mbo_i,
            a.mbo_c,
            a.miou,
            fmt_opt(a.fg_iou)
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Fixed label palette for rendered masks.
const PALETTE: [[f64; 3]; 12] = [
    [0.12, 0.47, 0.71],
    [1.00, 0.50, 0.05],
    [0.17, 0.63, 0.17],
    [0.84, 0.15, 0.16],
    [0.58, 0.40, 0.74],
    [0.55, 0.34, 0.29],
    [0.89, 0.47, 0.76],
    [0.50, 0.50, 0.50],
    [0.74, 0.74, 0.13],
    [0.09, 0.75, 0.81],
    [0.94, 0.90, 0.55],
    [0.32, 0.18, 0.59],
];

fn overlay(image: &Image, labels: &SegmentationMask) -> Image {
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            let l = labels.label_at(y, x) as usize;
            let color = PALETTE[l % PALETTE.len()];
            let base = image.get(y, x);
            let mut rgb = [0.0; 3];
            for c in 0..3 {
                rgb[c] = 0.45 * base[c] + 0.55 * color[c];
            }
            out.set(y, x, rgb);
        }
    }
    out
}

/// Horizontal strip: original image, ground-truth overlay, then one overlay
/// per prediction, separated by white gutters.
pub fn render_comparison(
    sample: &SceneSample,
    predictions: &[(&str, &SegmentationMask)],
) -> Image {
    let h = sample.image.height();
    let w = sample.image.width();
    let gutter = 2;
    let panels = 2 + predictions.len();
    let total_w = panels * w + (panels - 1) * gutter;
    let mut out = Image::from_pixels(h, total_w, vec![1.0; h * total_w * 3])
        .expect("panel buffer sized");
    let mut blit = |panel: usize, img: &Image| {
        let x0 = panel * (w + gutter);
        for y in 0..h {
            for x in 0..w {
                out.set(y, x0 + x, img.get(y, x));
            }
        }
    };
    blit(0, &sample.image);
    blit(1, &overlay(&sample.image, &sample.instance_masks));
    for (i, (_, pred)) in predictions.iter().enumerate() {
        blit(2 + i, &overlay(&sample.image, pred));
    }
    out
}
