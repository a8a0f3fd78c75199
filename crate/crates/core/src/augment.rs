//! Two-view augmentation for the contrastive indicator, plus the inverse
//! geometric alignment that maps per-view score grids back onto a common
//! source-coordinate grid.
//!
//! A view is produced by, in order: random resized crop (back to the source
//! resolution), horizontal flip, color jitter, grayscale, pixel inversion,
//! Gaussian blur. The geometric part (crop box, flip, view size) is captured
//! in an [`AugmentationRecord`] exactly; photometric ops are recorded with
//! their parameters for reproducibility but play no role in alignment.
//!
//! RNG draw order is fixed (crop, flip, jitter, grayscale, invert, blur) so
//! a seeded generator reproduces the identical (view, record) pair.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Image;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the source area, inclusive range.
    pub crop_scale: [f64; 2],
    /// Crop aspect ratio (w/h) range.
    pub crop_ratio: [f64; 2],
    pub min_crop: usize,
    pub flip_p: f64,
    pub jitter_p: f64,
    /// Brightness/contrast/saturation factors drawn from `1 ± strength`.
    pub jitter_strength: f64,
    pub grayscale_p: f64,
    pub invert_p: f64,
    pub blur_p: f64,
    pub blur_sigma: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale: [0.5, 1.0],
            crop_ratio: [0.75, 4.0 / 3.0],
            min_crop: 8,
            flip_p: 0.5,
            jitter_p: 0.8,
            jitter_strength: 0.4,
            grayscale_p: 0.2,
            invert_p: 0.2,
            blur_p: 1.0,
            blur_sigma: [0.1, 1.5],
        }
    }
}

impl AugmentConfig {
    /// The two contrastive branches differ only in blur probability: the
    /// student view always blurs, the teacher view rarely does.
    pub fn with_blur_p(mut self, p: f64) -> Self {
        self.blur_p = p;
        self
    }

    /// Disable every stochastic op and pin the crop to the full image;
    /// augmentation becomes the identity.
    pub fn identity() -> Self {
        AugmentConfig {
            crop_scale: [1.0, 1.0],
            crop_ratio: [1.0, 1.0],
            flip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            invert_p: 0.0,
            blur_p: 0.0,
            ..AugmentConfig::default()
        }
    }
}

/// Integer crop box in source-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum PhotometricOp {
    ColorJitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
    },
    Grayscale,
    Invert,
    GaussianBlur {
        sigma: f64,
    },
}

/// Everything needed to reconstruct the view-to-source geometric map
/// exactly, plus the applied photometric ops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub crop: CropBox,
    pub flip: bool,
    pub view_height: usize,
    pub view_width: usize,
    pub photometric: Vec<PhotometricOp>,
}

impl AugmentationRecord {
    pub fn identity(height: usize, width: usize) -> Self {
        AugmentationRecord {
            crop: CropBox {
                top: 0,
                left: 0,
                height,
                width,
            },
            flip: false,
            view_height: height,
            view_width: width,
            photometric: Vec::new(),
        }
    }

    pub fn is_geometric_identity(&self) -> bool {
        self.crop.top == 0
            && self.crop.left == 0
            && self.crop.height == self.view_height
            && self.crop.width == self.view_width
            && !self.flip
    }
}

// ---------------------------------------------------------------------------
// Image ops
// ---------------------------------------------------------------------------

pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = Image::new(img.height(), img.width());
    for y in 0..img.height() {
        for x in 0..img.width() {
            out.set(y, x, img.get(y, img.width() - 1 - x));
        }
    }
    out
}

/// Center-aligned bilinear resize.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    let mut out = Image::new(out_h, out_w);
    let sy = img.height() as f64 / out_h as f64;
    let sx = img.width() as f64 / out_w as f64;
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, img.height() as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height() - 1);
        let wy = fy - y0 as f64;
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, img.width() as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width() - 1);
            let wx = fx - x0 as f64;
            let mut rgb = [0.0; 3];
            for (c, channel) in rgb.iter_mut().enumerate() {
                let v00 = img.get(y0, x0)[c];
                let v01 = img.get(y0, x1)[c];
                let v10 = img.get(y1, x0)[c];
                let v11 = img.get(y1, x1)[c];
                *channel = v00 * (1.0 - wy) * (1.0 - wx)
                    + v01 * (1.0 - wy) * wx
                    + v10 * wy * (1.0 - wx)
                    + v11 * wy * wx;
            }
            out.set(y, x, rgb);
        }
    }
    out
}

fn crop_image(img: &Image, b: CropBox) -> Image {
    let mut out = Image::new(b.height, b.width);
    for y in 0..b.height {
        for x in 0..b.width {
            out.set(y, x, img.get(b.top + y, b.left + x));
        }
    }
    out
}

fn luminance(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn apply_photometric(img: &mut Image, op: &PhotometricOp) {
    match *op {
        PhotometricOp::ColorJitter {
            brightness,
            contrast,
            saturation,
        } => {
            let mean_lum: f64 = {
                let mut acc = 0.0;
                for y in 0..img.height() {
                    for x in 0..img.width() {
                        acc += luminance(img.get(y, x));
                    }
                }
                acc / (img.height() * img.width()) as f64
            };
            for y in 0..img.height() {
                for x in 0..img.width() {
                    let mut rgb = img.get(y, x);
                    for c in &mut rgb {
                        *c = (*c * brightness).clamp(0.0, 1.0);
                    }
                    for c in &mut rgb {
                        *c = ((*c - mean_lum) * contrast + mean_lum).clamp(0.0, 1.0);
                    }
                    let gray = luminance(rgb);
                    for c in &mut rgb {
                        *c = (gray + (*c - gray) * saturation).clamp(0.0, 1.0);
                    }
                    img.set(y, x, rgb);
                }
            }
        }
        PhotometricOp::Grayscale => {
            for y in 0..img.height() {
                for x in 0..img.width() {
                    let g = luminance(img.get(y, x));
                    img.set(y, x, [g, g, g]);
                }
            }
        }
        PhotometricOp::Invert => {
            for y in 0..img.height() {
                for x in 0..img.width() {
                    let rgb = img.get(y, x);
                    img.set(y, x, [1.0 - rgb[0], 1.0 - rgb[1], 1.0 - rgb[2]]);
                }
            }
        }
        PhotometricOp::GaussianBlur { sigma } => {
            gaussian_blur_in_place(img, sigma);
        }
    }
}

fn gaussian_blur_in_place(img: &mut Image, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (2.5 * sigma).ceil().max(1.0) as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for t in -radius..=radius {
        kernel.push((-(t as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let (h, w) = (img.height() as i64, img.width() as i64);
    // horizontal pass
    let mut tmp = img.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (ki, t) in (-radius..=radius).enumerate() {
                let sx = (x + t).clamp(0, w - 1);
                let rgb = img.get(y as usize, sx as usize);
                for c in 0..3 {
                    acc[c] += kernel[ki] * rgb[c];
                }
            }
            tmp.set(y as usize, x as usize, acc);
        }
    }
    // vertical pass
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (ki, t) in (-radius..=radius).enumerate() {
                let sy = (y + t).clamp(0, h - 1);
                let rgb = tmp.get(sy as usize, x as usize);
                for c in 0..3 {
                    acc[c] += kernel[ki] * rgb[c];
                }
            }
            img.set(y as usize, x as usize, acc);
        }
    }
}

fn sample_crop(img: &Image, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> CropBox {
    let (h, w) = (img.height(), img.width());
    let total = (h * w) as f64;
    for _ in 0..10 {
        let area = total * rng.gen_range(cfg.crop_scale[0]..=cfg.crop_scale[1]);
        let log_lo = cfg.crop_ratio[0].ln();
        let log_hi = cfg.crop_ratio[1].ln();
        let ratio = rng.gen_range(log_lo..=log_hi).exp();
        let cw = (area * ratio).sqrt().round() as usize;
        let ch = (area / ratio).sqrt().round() as usize;
        if cw >= cfg.min_crop && ch >= cfg.min_crop && cw <= w && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return CropBox {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    CropBox {
        top: 0,
        left: 0,
        height: h,
        width: w,
    }
}

/// Produce one augmented view and its record. The view has the same pixel
/// dimensions as the source image.
pub fn augment(
    image: &Image,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Image, AugmentationRecord)> {
    if image.height() < cfg.min_crop || image.width() < cfg.min_crop {
        return Err(Error::input(format!(
            "image {}x{} smaller than the crop minimum {}",
            image.height(),
            image.width(),
            cfg.min_crop
        )));
    }
    let crop = sample_crop(image, cfg, rng);
    let mut view = if crop.top == 0
        && crop.left == 0
        && crop.height == image.height()
        && crop.width == image.width()
    {
        image.clone()
    } else {
        resize_bilinear(&crop_image(image, crop), image.height(), image.width())
    };

    let flip = rng.gen_bool(cfg.flip_p);
    if flip {
        view = flip_horizontal(&view);
    }

    let mut photometric = Vec::new();
    if rng.gen_bool(cfg.jitter_p) {
        let s = cfg.jitter_strength;
        photometric.push(PhotometricOp::ColorJitter {
            brightness: rng.gen_range(1.0 - s..=1.0 + s),
            contrast: rng.gen_range(1.0 - s..=1.0 + s),
            saturation: rng.gen_range(1.0 - s..=1.0 + s),
        });
    }
    if rng.gen_bool(cfg.grayscale_p) {
        photometric.push(PhotometricOp::Grayscale);
    }
    if rng.gen_bool(cfg.invert_p) {
        photometric.push(PhotometricOp::Invert);
    }
    if rng.gen_bool(cfg.blur_p) {
        photometric.push(PhotometricOp::GaussianBlur {
            sigma: rng.gen_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]),
        });
    }
    for op in &photometric {
        apply_photometric(&mut view, op);
    }

    let record = AugmentationRecord {
        crop,
        flip,
        view_height: image.height(),
        view_width: image.width(),
        photometric,
    };
    Ok((view, record))
}

// ---------------------------------------------------------------------------
// Inverse alignment
// ---------------------------------------------------------------------------

/// A linear resampling operator from one view's feature grid onto the
/// common source-coordinate grid: `aligned = matrix · grid_values` where
/// grid values are flattened location-major `[grid_h * grid_w, K]`. The
/// operator depends only on the augmentation records, so it enters training
/// graphs as a constant and scores stay differentiable.
#[derive(Clone, Debug)]
pub struct AlignOperator {
    pub out_height: usize,
    pub out_width: usize,
    pub matrix: Tensor, // [out_h * out_w, grid_h * grid_w]
}

struct GridGeometry {
    grid_h: usize,
    grid_w: usize,
    crop: CropBox,
    flip: bool,
    view_h: f64,
    view_w: f64,
}

impl GridGeometry {
    /// Continuous feature-grid coordinates of a source-space point.
    fn feature_coords(&self, src_y: f64, src_x: f64) -> (f64, f64) {
        let vy = (src_y - self.crop.top as f64) * self.view_h / self.crop.height as f64;
        let mut vx = (src_x - self.crop.left as f64) * self.view_w / self.crop.width as f64;
        if self.flip {
            vx = self.view_w - vx;
        }
        let cell_h = self.view_h / self.grid_h as f64;
        let cell_w = self.view_w / self.grid_w as f64;
        (vy / cell_h - 0.5, vx / cell_w - 0.5)
    }
}

fn bilinear_row(matrix: &mut Tensor, row: usize, geom: &GridGeometry, fy: f64, fx: f64) {
    let fy = fy.clamp(0.0, geom.grid_h as f64 - 1.0);
    let fx = fx.clamp(0.0, geom.grid_w as f64 - 1.0);
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(geom.grid_h - 1);
    let x1 = (x0 + 1).min(geom.grid_w - 1);
    let wy = fy - y0 as f64;
    let wx = fx - x0 as f64;
    let mut add = |gy: usize, gx: usize, w: f64| {
        if w > 0.0 {
            let col = gy * geom.grid_w + gx;
            matrix.set(row, col, matrix.get(row, col) + w);
        }
    };
    add(y0, x0, (1.0 - wy) * (1.0 - wx));
    add(y0, x1, (1.0 - wy) * wx);
    add(y1, x0, wy * (1.0 - wx));
    add(y1, x1, wy * wx);
}

/// Build the pair of resampling operators taking the two views' score grids
/// onto the intersection of their crop boxes, at the feature resolution of
/// view `a`. Errors if the crops do not overlap.
pub fn alignment_operators(
    rec_a: &AugmentationRecord,
    grid_a: (usize, usize),
    rec_b: &AugmentationRecord,
    grid_b: (usize, usize),
) -> Result<(AlignOperator, AlignOperator)> {
    let top = rec_a.crop.top.max(rec_b.crop.top) as f64;
    let left = rec_a.crop.left.max(rec_b.crop.left) as f64;
    let bottom =
        (rec_a.crop.top + rec_a.crop.height).min(rec_b.crop.top + rec_b.crop.height) as f64;
    let right =
        (rec_a.crop.left + rec_a.crop.width).min(rec_b.crop.left + rec_b.crop.width) as f64;
    if bottom <= top || right <= left {
        return Err(Error::Alignment(format!(
            "crop boxes do not overlap: a={:?}, b={:?}",
            rec_a.crop, rec_b.crop
        )));
    }
    let inter_h = bottom - top;
    let inter_w = right - left;

    let geom_a = GridGeometry {
        grid_h: grid_a.0,
        grid_w: grid_a.1,
        crop: rec_a.crop,
        flip: rec_a.flip,
        view_h: rec_a.view_height as f64,
        view_w: rec_a.view_width as f64,
    };
    let geom_b = GridGeometry {
        grid_h: grid_b.0,
        grid_w: grid_b.1,
        crop: rec_b.crop,
        flip: rec_b.flip,
        view_h: rec_b.view_height as f64,
        view_w: rec_b.view_width as f64,
    };

    // common grid at view a's source-space cell size
    let cell_h = rec_a.crop.height as f64 / grid_a.0 as f64;
    let cell_w = rec_a.crop.width as f64 / grid_a.1 as f64;
    let out_h = ((inter_h / cell_h).round() as usize).max(1);
    let out_w = ((inter_w / cell_w).round() as usize).max(1);

    let mut ma = Tensor::zeros(out_h * out_w, grid_a.0 * grid_a.1);
    let mut mb = Tensor::zeros(out_h * out_w, grid_b.0 * grid_b.1);
    for i in 0..out_h {
        for j in 0..out_w {
            let src_y = top + (i as f64 + 0.5) * inter_h / out_h as f64;
            let src_x = left + (j as f64 + 0.5) * inter_w / out_w as f64;
            let row = i * out_w + j;
            let (fy, fx) = geom_a.feature_coords(src_y, src_x);
            bilinear_row(&mut ma, row, &geom_a, fy, fx);
            let (fy, fx) = geom_b.feature_coords(src_y, src_x);
            bilinear_row(&mut mb, row, &geom_b, fy, fx);
        }
    }
    Ok((
        AlignOperator {
            out_height: out_h,
            out_width: out_w,
            matrix: ma,
        },
        AlignOperator {
            out_height: out_h,
            out_width: out_w,
            matrix: mb,
        },
    ))
}
