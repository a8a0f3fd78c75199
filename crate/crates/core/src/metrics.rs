//! Set-matched segmentation metrics: mean best overlap (instance and
//! category variants share one routine), Hungarian-matched mIoU, and the
//! binary fg/bg IoU used to score the indicator.
//!
//! Conventions, also recorded in the eval CSV metadata:
//! - best-overlap and mIoU average over ground-truth regions, excluding the
//!   mask's `ignore_label` (the background region of instance masks);
//! - mIoU matches one-to-one and counts unmatched ground-truth regions as 0;
//! - per-image scores are averaged first, then averaged over the dataset.

use crate::error::{Error, Result};
use crate::matching::{hungarian, CostMatrix};

/// Hard label map with an optional ignored label (used for the ground-truth
/// background region).
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    ignore_label: Option<u32>,
}

impl SegmentationMask {
    pub fn new(
        height: usize,
        width: usize,
        labels: Vec<u32>,
        ignore_label: Option<u32>,
    ) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::input(format!(
                "label map length {} != {height}x{width}",
                labels.len()
            )));
        }
        let mask = SegmentationMask {
            height,
            width,
            labels,
            ignore_label,
        };
        if mask.present_labels().is_empty() {
            return Err(Error::input("segmentation mask has no non-ignored pixels"));
        }
        Ok(mask)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn ignore_label(&self) -> Option<u32> {
        self.ignore_label
    }

    pub fn label_at(&self, i: usize, j: usize) -> u32 {
        self.labels[i * self.width + j]
    }

    /// Same pixels with a different ignore convention.
    pub fn with_ignore(&self, ignore_label: Option<u32>) -> Result<Self> {
        Self::new(self.height, self.width, self.labels.clone(), ignore_label)
    }

    /// Distinct non-ignored labels in ascending order.
    pub fn present_labels(&self) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::new();
        for &l in &self.labels {
            if Some(l) == self.ignore_label {
                continue;
            }
            if let Err(pos) = out.binary_search(&l) {
                out.insert(pos, l);
            }
        }
        out
    }

    /// Pixel set of one label.
    pub fn region(&self, label: u32) -> PixelSet {
        PixelSet {
            height: self.height,
            width: self.width,
            members: self.labels.iter().map(|&l| l == label).collect(),
        }
    }

    /// Nearest-neighbour upsample by an integer factor (used to lift
    /// feature-grid predictions to image resolution).
    pub fn upsample(&self, factor: usize) -> SegmentationMask {
        assert!(factor >= 1);
        let (h, w) = (self.height * factor, self.width * factor);
        let mut labels = vec![0u32; h * w];
        for i in 0..h {
            for j in 0..w {
                labels[i * w + j] = self.label_at(i / factor, j / factor);
            }
        }
        SegmentationMask {
            height: h,
            width: w,
            labels,
            ignore_label: self.ignore_label,
        }
    }
}

/// A set of pixels on a fixed grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelSet {
    pub height: usize,
    pub width: usize,
    pub members: Vec<bool>,
}

impl PixelSet {
    pub fn size(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }
}

/// Intersection over union of two pixel sets; 0 when the union is empty.
pub fn iou(a: &PixelSet, b: &PixelSet) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::input(format!(
            "pixel sets on different grids: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.members.iter().zip(&b.members) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

fn check_grids(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<()> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(Error::input(format!(
            "prediction grid {}x{} != ground truth grid {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    Ok(())
}

/// Mean best overlap: for each non-ignored ground-truth region, the best
/// IoU over all predicted regions; averaged over ground-truth regions.
/// Label-source-agnostic: pass instance labels for mBO^i, category labels
/// for mBO^c.
pub fn mbo(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<f64> {
    check_grids(pred, gt)?;
    let gt_labels = gt.present_labels();
    if gt_labels.is_empty() {
        return Err(Error::input("no valid ground-truth region for mbo"));
    }
    let pred_regions: Vec<PixelSet> = pred
        .present_labels()
        .iter()
        .map(|&l| pred.region(l))
        .collect();
    let mut total = 0.0;
    for &gl in &gt_labels {
        let gt_region = gt.region(gl);
        let mut best = 0.0f64;
        for pr in &pred_regions {
            best = best.max(iou(pr, &gt_region)?);
        }
        total += best;
    }
    Ok(total / gt_labels.len() as f64)
}

/// Hungarian-matched mean IoU: one-to-one matching between predicted and
/// non-ignored ground-truth regions under cost `1 - IoU`; the mean is taken
/// over the ground-truth region count, with unmatched ground-truth regions
/// contributing 0.
pub fn miou_hungarian(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<f64> {
    check_grids(pred, gt)?;
    let gt_labels = gt.present_labels();
    if gt_labels.is_empty() {
        return Err(Error::input("no valid ground-truth region for miou"));
    }
    let pred_labels = pred.present_labels();
    let pred_regions: Vec<PixelSet> = pred_labels.iter().map(|&l| pred.region(l)).collect();
    let gt_regions: Vec<PixelSet> = gt_labels.iter().map(|&l| gt.region(l)).collect();

    let mut ious = vec![0.0; pred_regions.len() * gt_regions.len()];
    for (i, pr) in pred_regions.iter().enumerate() {
        for (j, gr) in gt_regions.iter().enumerate() {
            ious[i * gt_regions.len() + j] = iou(pr, gr)?;
        }
    }
    let cost = CostMatrix::from_fn(pred_regions.len(), gt_regions.len(), |i, j| {
        1.0 - ious[i * gt_regions.len() + j]
    })?;
    let matching = hungarian(&cost)?;
    let mut total = 0.0;
    for (t, p) in matching.matched_pairs() {
        total += ious[p * gt_regions.len() + t];
    }
    Ok(total / gt_labels.len() as f64)
}

/// Best-overlap IoU between two binary fg/bg maps. Both polarities of the
/// prediction are tried and the better mean over matched region pairs wins,
/// so the score is invariant to which side the predictor calls
/// "foreground". Pairs where both regions are empty are skipped (a map that
/// is entirely one label has only one real region).
pub fn binary_fg_iou(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<f64> {
    check_grids(pred, gt)?;
    for (name, mask) in [("prediction", pred), ("ground truth", gt)] {
        if mask.labels.iter().any(|&l| l > 1) {
            return Err(Error::input(format!(
                "{name} is not a binary fg/bg map (labels must be 0 or 1)"
            )));
        }
    }
    let p = [pred.region(0), pred.region(1)];
    let g = [gt.region(0), gt.region(1)];
    let mut best: f64 = 0.0;
    for polarity in 0..2 {
        let mut total = 0.0;
        let mut pairs = 0usize;
        for j in 0..2 {
            let pi = &p[(j + polarity) % 2];
            let gj = &g[j];
            if pi.size() == 0 && gj.size() == 0 {
                continue;
            }
            total += iou(pi, gj)?;
            pairs += 1;
        }
        if pairs > 0 {
            best = best.max(total / pairs as f64);
        }
    }
    Ok(best)
}
