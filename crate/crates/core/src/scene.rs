//! Synthetic multi-object scenes with exact ground truth, plus dataset I/O.
//!
//! Scenes are flat-colored shapes (circles, squares, triangles) over a
//! flat, gradient, or procedurally textured background. The texture mode
//! exists to give the background stronger low-level variation than the
//! object interiors, which is the regime where plain reconstruction-driven
//! slot binding fragments the background. Object colors are drawn from a
//! warm/bright palette and backgrounds from a cool/dark one so the two are
//! statistically separable without labels.
//!
//! Directory layout written by [`write_dataset`]:
//!
//! ```text
//! dir/
//!   manifest.json      counts, generator config, per-sample metadata
//!   images/NNNNN.png   8-bit RGB
//!   masks/NNNNN.png    8-bit single channel, 0 = background, 1..n = objects
//!   fgbg/NNNNN.png     8-bit single channel, 0 = background, 255 = foreground
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SegmentationMask;
use crate::tensor::derive_seed;

/// Minimum visible fraction of the image each object must keep after
/// occlusion.
const MIN_VISIBLE_FRACTION: f64 = 0.01;
const MAX_SCENE_ATTEMPTS: usize = 64;

/// RGB image with f64 channels in `[0, 1]`, row-major, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
        }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::input(format!(
                "pixel buffer length {} != {height}x{width}x3",
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i] = rgb[0];
        self.pixels[i + 1] = rgb[1];
        self.pixels[i + 2] = rgb[2];
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    /// 8-bit quantization used for storage and display.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::input("rgb8 buffer length mismatch"));
        }
        Ok(Image {
            height,
            width,
            pixels: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    /// Category label used by the category-level masks; 0 stays background.
    pub fn category_label(self) -> u32 {
        match self {
            ShapeKind::Circle => 1,
            ShapeKind::Square => 2,
            ShapeKind::Triangle => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    Flat,
    Gradient,
    Texture,
    /// Pick one of the three modes per scene.
    Mix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub image_size: usize,
    /// Inclusive [min, max] object count; must stay within [1, 8].
    pub object_count: [usize; 2],
    pub shapes: Vec<ShapeKind>,
    /// Relative strength of per-object color perturbation.
    pub color_jitter: f64,
    pub background: BackgroundMode,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            image_size: 64,
            object_count: [2, 4],
            shapes: vec![ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle],
            color_jitter: 0.05,
            background: BackgroundMode::Texture,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::config("image_size must be positive"));
        }
        let [lo, hi] = self.object_count;
        if lo < 1 || hi > 8 || lo > hi {
            return Err(Error::config(format!(
                "object_count range [{lo}, {hi}] must lie within [1, 8]"
            )));
        }
        if self.shapes.is_empty() {
            return Err(Error::config("shape palette must not be empty"));
        }
        Ok(())
    }
}

/// Metadata of one placed object, in image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub kind: ShapeKind,
    pub color: [f64; 3],
    pub center: [f64; 2], // (y, x)
    pub size: f64,        // radius / half-side
    pub label: u32,
}

/// One synthetic scene with exact ground truth.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub image: Image,
    /// 0 = background, 1..=n = objects (visible pixels only); background is
    /// the ignored label for evaluation.
    pub instance_masks: SegmentationMask,
    /// 0 = background, 1 = any object pixel.
    pub fgbg_mask: SegmentationMask,
    pub objects: Vec<ObjectSpec>,
    pub index: u64,
    pub generator_seed: u64,
}

impl SceneSample {
    /// Category-level labels (shape kind) for mBO^c.
    pub fn category_mask(&self) -> SegmentationMask {
        let labels: Vec<u32> = self
            .instance_masks
            .labels()
            .iter()
            .map(|&l| {
                if l == 0 {
                    0
                } else {
                    self.objects[(l - 1) as usize].kind.category_label()
                }
            })
            .collect();
        SegmentationMask::new(
            self.instance_masks.height(),
            self.instance_masks.width(),
            labels,
            Some(0),
        )
        .expect("category mask is structurally valid")
    }

    /// Checks the partition invariants between image, instance labels, and
    /// the fg/bg map.
    pub fn validate(&self) -> Result<()> {
        let n = self.objects.len() as u32;
        for (&l, &f) in self
            .instance_masks
            .labels()
            .iter()
            .zip(self.fgbg_mask.labels())
        {
            if l > n {
                return Err(Error::input(format!("instance label {l} out of range")));
            }
            if (l > 0) != (f == 1) {
                return Err(Error::input("fgbg mask inconsistent with instance labels"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as i64 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn color_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Cool, darker palette for backgrounds.
fn sample_background_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let h = rng.gen_range(0.52..0.72);
    let s = rng.gen_range(0.3..0.55);
    let v = rng.gen_range(0.28..0.48);
    hsv_to_rgb(h, s, v)
}

/// Warm, brighter palette for objects.
fn sample_object_color(rng: &mut ChaCha8Rng, jitter: f64) -> [f64; 3] {
    let h = if rng.gen_bool(0.7) {
        rng.gen_range(0.0..0.17)
    } else {
        rng.gen_range(0.8..1.0)
    };
    let s = rng.gen_range(0.6..1.0);
    let v = rng.gen_range(0.7..1.0);
    let mut rgb = hsv_to_rgb(h, s, v);
    for c in &mut rgb {
        *c = (*c + rng.gen_range(-jitter..=jitter)).clamp(0.0, 1.0);
    }
    rgb
}

/// Small deterministic per-pixel hash noise in [-1, 1].
fn pixel_hash_noise(seed: u64, x: usize, y: usize) -> f64 {
    let h = derive_seed(seed, (x as u64) << 32 | y as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn paint_background(
    img: &mut Image,
    mode: BackgroundMode,
    rng: &mut ChaCha8Rng,
    noise_seed: u64,
) -> [f64; 3] {
    let size = img.width();
    let mode = match mode {
        BackgroundMode::Mix => match rng.gen_range(0..3) {
            0 => BackgroundMode::Flat,
            1 => BackgroundMode::Gradient,
            _ => BackgroundMode::Texture,
        },
        m => m,
    };
    let base = sample_background_color(rng);
    match mode {
        BackgroundMode::Flat => {
            for y in 0..size {
                for x in 0..size {
                    img.set(y, x, base);
                }
            }
        }
        BackgroundMode::Gradient => {
            let other = sample_background_color(rng);
            for y in 0..size {
                let t = y as f64 / (size - 1).max(1) as f64;
                let row = [
                    base[0] * (1.0 - t) + other[0] * t,
                    base[1] * (1.0 - t) + other[1] * t,
                    base[2] * (1.0 - t) + other[2] * t,
                ];
                for x in 0..size {
                    img.set(y, x, row);
                }
            }
        }
        BackgroundMode::Texture => {
            // two-frequency plaid plus per-pixel hash noise; strong enough
            // that patch statistics vary across the background
            let fx = rng.gen_range(2.0..6.0);
            let fy = rng.gen_range(2.0..6.0);
            let px = rng.gen_range(0.0..1.0);
            let py = rng.gen_range(0.0..1.0);
            let amp = rng.gen_range(0.10..0.22);
            let noise_amp = rng.gen_range(0.02..0.05);
            let tau = std::f64::consts::TAU;
            for y in 0..size {
                for x in 0..size {
                    let u = x as f64 / size as f64;
                    let v = y as f64 / size as f64;
                    let plaid = (tau * (fx * u + px)).sin() * (tau * (fy * v + py)).sin();
                    let n = pixel_hash_noise(noise_seed, x, y) * noise_amp;
                    let mut rgb = base;
                    for c in &mut rgb {
                        *c = (*c + amp * plaid + n).clamp(0.0, 1.0);
                    }
                    img.set(y, x, rgb);
                }
            }
        }
        BackgroundMode::Mix => unreachable!(),
    }
    base
}

fn inside_shape(kind: ShapeKind, cy: f64, cx: f64, size: f64, y: f64, x: f64) -> bool {
    match kind {
        ShapeKind::Circle => (y - cy).powi(2) + (x - cx).powi(2) <= size * size,
        ShapeKind::Square => (y - cy).abs() <= size && (x - cx).abs() <= size,
        ShapeKind::Triangle => {
            // upright triangle: apex (cy - size, cx), base corners at
            // (cy + size, cx ± size)
            let dy = y - (cy - size);
            if !(0.0..=2.0 * size).contains(&dy) {
                return false;
            }
            let half_width = dy / 2.0;
            (x - cx).abs() <= half_width
        }
    }
}

/// Deterministically synthesize one scene for `(config.seed, index)`.
pub fn generate_scene(config: &GeneratorConfig, index: u64) -> Result<SceneSample> {
    config.validate()?;
    let sample_seed = derive_seed(config.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let size = config.image_size;
    let total_pixels = (size * size) as f64;

    for _attempt in 0..MAX_SCENE_ATTEMPTS {
        let mut image = Image::new(size, size);
        let noise_seed = rng.gen::<u64>();
        let bg_color = paint_background(&mut image, config.background, &mut rng, noise_seed);

        let n = rng.gen_range(config.object_count[0]..=config.object_count[1]);
        let mut objects: Vec<ObjectSpec> = Vec::with_capacity(n);
        for label in 1..=n as u32 {
            let kind = config.shapes[rng.gen_range(0..config.shapes.len())];
            let mut color = sample_object_color(&mut rng, config.color_jitter);
            for _ in 0..16 {
                let clash = color_dist(color, bg_color) < 0.25
                    || objects.iter().any(|o| color_dist(color, o.color) < 0.2);
                if !clash {
                    break;
                }
                color = sample_object_color(&mut rng, config.color_jitter);
            }
            let obj_size = rng.gen_range(0.13..0.24) * size as f64;
            let margin = obj_size + 1.0;
            let cy = rng.gen_range(margin..size as f64 - margin);
            let cx = rng.gen_range(margin..size as f64 - margin);
            objects.push(ObjectSpec {
                kind,
                color,
                center: [cy, cx],
                size: obj_size,
                label,
            });
        }

        // paint in order; later objects occlude earlier ones
        let mut labels = vec![0u32; size * size];
        for obj in &objects {
            for y in 0..size {
                for x in 0..size {
                    if inside_shape(
                        obj.kind,
                        obj.center[0],
                        obj.center[1],
                        obj.size,
                        y as f64 + 0.5,
                        x as f64 + 0.5,
                    ) {
                        labels[y * size + x] = obj.label;
                        image.set(y, x, obj.color);
                    }
                }
            }
        }

        // every object must stay visible after occlusion
        let mut counts = vec![0usize; n + 1];
        for &l in &labels {
            counts[l as usize] += 1;
        }
        let degenerate = (1..=n).any(|l| (counts[l] as f64) < MIN_VISIBLE_FRACTION * total_pixels);
        if degenerate {
            continue;
        }

        let fg: Vec<u32> = labels.iter().map(|&l| (l > 0) as u32).collect();
        let instance_masks = SegmentationMask::new(size, size, labels, Some(0))?;
        let fgbg_mask = SegmentationMask::new(size, size, fg, None)?;
        let sample = SceneSample {
            image,
            instance_masks,
            fgbg_mask,
            objects,
            index,
            generator_seed: sample_seed,
        };
        sample.validate()?;
        return Ok(sample);
    }
    Err(Error::Generation(format!(
        "could not place objects for sample {index} after {MAX_SCENE_ATTEMPTS} attempts"
    )))
}

/// Generate `count` scenes; `workers > 1` generates in parallel (each
/// sample's generator derives from (seed, index), so the result does not
/// depend on the worker count).
pub fn generate_scenes(config: &GeneratorConfig, count: usize, workers: usize) -> Result<Vec<SceneSample>> {
    config.validate()?;
    if workers <= 1 || count < 2 {
        return (0..count as u64).map(|i| generate_scene(config, i)).collect();
    }
    let workers = workers.min(count);
    let mut results: Vec<Option<Result<SceneSample>>> = (0..count).map(|_| None).collect();
    let chunk = count.div_ceil(workers);
    std::thread::scope(|scope| {
        let mut rest: &mut [Option<Result<SceneSample>>] = &mut results;
        let mut start = 0usize;
        let mut handles = Vec::new();
        while !rest.is_empty() {
            let take = chunk.min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            rest = tail;
            let base = start;
            handles.push(scope.spawn(move || {
                for (off, slot) in head.iter_mut().enumerate() {
                    *slot = Some(generate_scene(config, (base + off) as u64));
                }
            }));
            start += take;
        }
        for h in handles {
            h.join().expect("generation worker panicked");
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("all slots filled"))
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset I/O
// ---------------------------------------------------------------------------

const MANIFEST_FORMAT: &str = "slotforge-dataset-v1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    count: usize,
    config: GeneratorConfig,
    samples: Vec<SampleMeta>,
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    index: u64,
    generator_seed: u64,
    objects: Vec<ObjectSpec>,
}

fn sample_name(i: u64) -> String {
    format!("{i:05}.png")
}

fn save_png_rgb(path: &Path, img: &Image) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8())
        .expect("buffer sized to image");
    buf.save(path)
        .map_err(|e| Error::data_format(path, format!("png write failed: {e}")))
}

fn save_png_gray(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<()> {
    let buf = image::GrayImage::from_raw(width as u32, height as u32, values.to_vec())
        .expect("buffer sized to image");
    buf.save(path)
        .map_err(|e| Error::data_format(path, format!("png write failed: {e}")))
}

fn load_png_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::data_format(path, format!("png read failed: {e}")))?
        .to_rgb8();
    Image::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw())
}

/// Load an 8-bit single-channel label PNG.
pub fn load_png_labels(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)
        .map_err(|e| Error::data_format(path, format!("png read failed: {e}")))?
        .to_luma8();
    Ok((
        img.height() as usize,
        img.width() as usize,
        img.into_raw(),
    ))
}

/// Write an RGB image as 8-bit PNG.
pub fn save_image_png(path: &Path, img: &Image) -> Result<()> {
    save_png_rgb(path, img)
}

/// Load an RGB PNG back into an [`Image`].
pub fn load_image_png(path: &Path) -> Result<Image> {
    load_png_rgb(path)
}

/// Write a label map as an 8-bit single-channel PNG (labels must fit u8).
pub fn save_label_png(path: &Path, mask: &SegmentationMask) -> Result<()> {
    let mut values = Vec::with_capacity(mask.labels().len());
    for &l in mask.labels() {
        if l > u8::MAX as u32 {
            return Err(Error::input(format!(
                "label {l} does not fit an 8-bit PNG"
            )));
        }
        values.push(l as u8);
    }
    save_png_gray(path, mask.width(), mask.height(), &values)
}

/// Load an 8-bit single-channel label PNG as a mask.
pub fn load_label_png(path: &Path, ignore_label: Option<u32>) -> Result<SegmentationMask> {
    let (h, w, values) = load_png_labels(path)?;
    SegmentationMask::new(h, w, values.iter().map(|&v| v as u32).collect(), ignore_label)
}

/// Write `count` generated samples plus the manifest.
pub fn write_dataset(
    dir: &Path,
    config: &GeneratorConfig,
    count: usize,
    workers: usize,
) -> Result<Vec<SceneSample>> {
    let samples = generate_scenes(config, count, workers)?;
    write_prepared_dataset(dir, config, &samples)?;
    Ok(samples)
}

/// Write already-generated samples in the documented layout.
pub fn write_prepared_dataset(
    dir: &Path,
    config: &GeneratorConfig,
    samples: &[SceneSample],
) -> Result<()> {
    for sub in ["images", "masks", "fgbg"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    for s in samples {
        let name = sample_name(s.index);
        save_png_rgb(&dir.join("images").join(&name), &s.image)?;
        let mask8: Vec<u8> = s.instance_masks.labels().iter().map(|&l| l as u8).collect();
        save_png_gray(
            &dir.join("masks").join(&name),
            s.instance_masks.width(),
            s.instance_masks.height(),
            &mask8,
        )?;
        let fg8: Vec<u8> = s
            .fgbg_mask
            .labels()
            .iter()
            .map(|&l| if l > 0 { 255 } else { 0 })
            .collect();
        save_png_gray(
            &dir.join("fgbg").join(&name),
            s.fgbg_mask.width(),
            s.fgbg_mask.height(),
            &fg8,
        )?;
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        count: samples.len(),
        config: config.clone(),
        samples: samples
            .iter()
            .map(|s| SampleMeta {
                index: s.index,
                generator_seed: s.generator_seed,
                objects: s.objects.clone(),
            })
            .collect(),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Load a dataset directory written by [`write_dataset`]. An empty or
/// missing directory yields an empty sequence with a warning; a directory
/// with data but a broken or inconsistent manifest is an error.
pub fn load_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        let has_files = dir
            .join("images")
            .read_dir()
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
        if has_files {
            return Err(Error::data_format(
                manifest_path,
                "images present but manifest.json missing",
            ));
        }
        log::warn!("{}: no manifest.json, treating as empty dataset", dir.display());
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::data_format(&manifest_path, format!("bad manifest: {e}")))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::data_format(
            &manifest_path,
            format!("unsupported format '{}'", manifest.format),
        ));
    }
    if manifest.samples.len() != manifest.count {
        return Err(Error::data_format(
            &manifest_path,
            format!(
                "manifest count {} != sample entries {}",
                manifest.count,
                manifest.samples.len()
            ),
        ));
    }
    let mut out = Vec::with_capacity(manifest.count);
    for meta in manifest.samples {
        let name = sample_name(meta.index);
        let image = load_png_rgb(&dir.join("images").join(&name))?;
        let (mh, mw, mask8) = load_png_labels(&dir.join("masks").join(&name))?;
        let (fh, fw, fg8) = load_png_labels(&dir.join("fgbg").join(&name))?;
        if (mh, mw) != (image.height(), image.width()) || (fh, fw) != (mh, mw) {
            return Err(Error::data_format(
                dir.join("masks").join(&name),
                "mask dimensions do not match the image",
            ));
        }
        let labels: Vec<u32> = mask8.iter().map(|&b| b as u32).collect();
        let fg: Vec<u32> = fg8.iter().map(|&b| (b > 0) as u32).collect();
        let sample = SceneSample {
            image,
            instance_masks: SegmentationMask::new(mh, mw, labels, Some(0))?,
            fgbg_mask: SegmentationMask::new(fh, fw, fg, None)?,
            objects: meta.objects,
            index: meta.index,
            generator_seed: meta.generator_seed,
        };
        sample.validate()?;
        out.push(sample);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> GeneratorConfig {
        GeneratorConfig {
            seed: 11,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic_per_index() {
        let cfg = config();
        let a = generate_scene(&cfg, 3).unwrap();
        let b = generate_scene(&cfg, 3).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.instance_masks, b.instance_masks);
        let c = generate_scene(&cfg, 4).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn single_object_range_gives_two_labels() {
        let cfg = GeneratorConfig {
            object_count: [1, 1],
            ..config()
        };
        let s = generate_scene(&cfg, 0).unwrap();
        let present: Vec<u32> = s.instance_masks.with_ignore(None).unwrap().present_labels();
        assert_eq!(present, vec![0, 1]);
    }

    #[test]
    fn masks_partition_pixels_and_match_fgbg() {
        let cfg = config();
        for i in 0..20 {
            let s = generate_scene(&cfg, i).unwrap();
            s.validate().unwrap();
            // each object keeps its minimum visible area
            for obj in &s.objects {
                let visible = s
                    .instance_masks
                    .labels()
                    .iter()
                    .filter(|&&l| l == obj.label)
                    .count();
                assert!(visible as f64 >= 0.01 * (64.0 * 64.0), "object starved");
            }
        }
    }

    #[test]
    fn parallel_generation_matches_serial() {
        let cfg = config();
        let serial = generate_scenes(&cfg, 6, 1).unwrap();
        let parallel = generate_scenes(&cfg, 6, 3).unwrap();
        for (a, b) in serial.iter().zip(&parallel) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.instance_masks, b.instance_masks);
        }
    }

    #[test]
    fn dataset_round_trip_is_bit_exact_for_masks() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config();
        let written = write_dataset(dir.path(), &cfg, 5, 1).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 5);
        for (w, l) in written.iter().zip(&loaded) {
            assert_eq!(w.instance_masks, l.instance_masks);
            assert_eq!(w.fgbg_mask, l.fgbg_mask);
            assert_eq!(w.objects, l.objects);
            // image round-trips through 8-bit quantization
            assert_eq!(w.image.to_rgb8(), l.image.to_rgb8());
        }
    }

    #[test]
    fn empty_dir_loads_as_empty() {
        let dir = tempfile::tempdir().unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn manifest_count_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config();
        write_dataset(dir.path(), &cfg, 3, 1).unwrap();
        let path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&path).unwrap();
        let text = text.replace("\"count\": 3", "\"count\": 4");
        std::fs::write(&path, text).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn category_mask_uses_shape_kinds() {
        let cfg = GeneratorConfig {
            shapes: vec![ShapeKind::Triangle],
            object_count: [1, 1],
            ..config()
        };
        let s = generate_scene(&cfg, 0).unwrap();
        let cat = s.category_mask();
        assert_eq!(cat.present_labels(), vec![ShapeKind::Triangle.category_label()]);
    }
}
