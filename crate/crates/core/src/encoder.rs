//! Frozen patch-embedding encoder.
//!
//! Non-overlapping `patch x patch` RGB patches are flattened and linearly
//! projected by a fixed random matrix, then fixed sinusoidal position codes
//! are added. The projection is drawn once from the encoder seed and never
//! trained; its hash is part of the pipeline's freezing contract.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::FeatureMap;
use crate::error::{Error, Result};
use crate::optim::{param_hash, ParamGroup};
use crate::scene::Image;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch: usize,
    pub dim: usize,
    pub seed: u64,
    /// Amplitude of the additive position codes. Kept well below the
    /// content scale so patch appearance, not location, dominates the
    /// feature geometry.
    pub pos_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch: 8,
            dim: 64,
            seed: 7,
            pos_scale: 0.15,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PatchEncoder {
    patch: usize,
    dim: usize,
    pos_scale: f64,
    weight: Tensor, // [patch*patch*3, dim]
    bias: Tensor,   // [1, dim]
}

impl PatchEncoder {
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        if config.patch == 0 || config.dim == 0 {
            return Err(Error::config("encoder patch and dim must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let fan_in = config.patch * config.patch * 3;
        let weight = Tensor::randn(fan_in, config.dim, 1.0 / (fan_in as f64).sqrt(), &mut rng);
        let bias = Tensor::randn(1, config.dim, 0.02, &mut rng);
        Ok(PatchEncoder {
            patch: config.patch,
            dim: config.dim,
            pos_scale: config.pos_scale,
            weight,
            bias,
        })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Hash of the frozen projection; constant across the pipeline lifetime.
    pub fn param_hash(&self) -> String {
        param_hash(self)
    }

    /// Encode an image whose sides are divisible by the patch size.
    pub fn encode(&self, image: &Image) -> Result<FeatureMap> {
        if image.height() % self.patch != 0 || image.width() % self.patch != 0 {
            return Err(Error::config(format!(
                "image {}x{} not divisible by patch size {}",
                image.height(),
                image.width(),
                self.patch
            )));
        }
        let gh = image.height() / self.patch;
        let gw = image.width() / self.patch;
        let n = gh * gw;
        // pixels are centered so features carry signed content directions
        // instead of a shared brightness offset
        let mut patches = Tensor::zeros(n, self.patch * self.patch * 3);
        for gy in 0..gh {
            for gx in 0..gw {
                let row = patches.row_mut(gy * gw + gx);
                let mut idx = 0;
                for dy in 0..self.patch {
                    for dx in 0..self.patch {
                        let rgb = image.get(gy * self.patch + dy, gx * self.patch + dx);
                        row[idx] = rgb[0] - 0.5;
                        row[idx + 1] = rgb[1] - 0.5;
                        row[idx + 2] = rgb[2] - 0.5;
                        idx += 3;
                    }
                }
            }
        }
        let mut features = patches.matmul(&self.weight);
        let pos = sinusoidal_position_codes(n, self.dim);
        for i in 0..n {
            let prow = pos.row(i);
            let frow = features.row_mut(i);
            for d in 0..self.dim {
                frow[d] += self.bias.get(0, d) + self.pos_scale * prow[d];
            }
        }
        FeatureMap::new(gh, gw, features)
    }
}

impl ParamGroup for PatchEncoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("weight", &self.weight);
        f("bias", &self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

/// Standard interleaved sin/cos codes over the flattened location index.
pub fn sinusoidal_position_codes(locations: usize, dim: usize) -> Tensor {
    let mut out = Tensor::zeros(locations, dim);
    for n in 0..locations {
        for d in 0..dim {
            let pair = (d / 2) as f64;
            let rate = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let angle = n as f64 * rate;
            let v = if d % 2 == 0 { angle.sin() } else { angle.cos() };
            out.set(n, d, v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder() -> PatchEncoder {
        PatchEncoder::new(&EncoderConfig::default()).unwrap()
    }

    #[test]
    fn shape_arithmetic() {
        let enc = encoder();
        let img = Image::new(64, 64);
        let fm = enc.encode(&img).unwrap();
        assert_eq!((fm.height(), fm.width(), fm.dim()), (8, 8, 64));
    }

    #[test]
    fn indivisible_size_is_config_error() {
        let enc = encoder();
        let img = Image::new(60, 64);
        assert!(enc.encode(&img).is_err());
    }

    #[test]
    fn neutral_gray_features_are_pos_codes_plus_bias() {
        let enc = encoder();
        let mut img = Image::new(64, 64);
        img.pixels_mut().fill(0.5);
        let fm = enc.encode(&img).unwrap();
        let pos = sinusoidal_position_codes(64, 64);
        for n in 0..64 {
            for d in 0..64 {
                let expect = enc.pos_scale * pos.get(n, d) + enc.bias.get(0, d);
                assert!((fm.values().get(n, d) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_image_features_are_the_affine_base_point() {
        // pixels are centered by 0.5 before projection, so the zero image
        // evaluates to bias + pos - 0.5 * (column sums of the projection)
        let enc = encoder();
        let fm = enc.encode(&Image::new(64, 64)).unwrap();
        let pos = sinusoidal_position_codes(64, 64);
        let mut col_sums = vec![0.0; 64];
        for r in 0..enc.weight.rows() {
            for (d, s) in col_sums.iter_mut().enumerate() {
                *s += enc.weight.get(r, d);
            }
        }
        for n in 0..64 {
            for d in 0..64 {
                let expect =
                    enc.pos_scale * pos.get(n, d) + enc.bias.get(0, d) - 0.5 * col_sums[d];
                assert!((fm.values().get(n, d) - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_patch_change_is_local_before_position_codes() {
        let enc = encoder();
        let a = Image::new(64, 64);
        let mut b = Image::new(64, 64);
        // perturb one pixel inside grid cell (2, 3)
        b.set(2 * 8 + 1, 3 * 8 + 4, [0.5, 0.25, 0.75]);
        let fa = enc.encode(&a).unwrap();
        let fb = enc.encode(&b).unwrap();
        for n in 0..64 {
            let differs = fa.values().row(n) != fb.values().row(n);
            assert_eq!(differs, n == 2 * 8 + 3, "locality violated at cell {n}");
        }
    }

    #[test]
    fn encoding_is_frozen_and_deterministic() {
        let e1 = encoder();
        let e2 = encoder();
        assert_eq!(e1.param_hash(), e2.param_hash());
        let cfg = EncoderConfig {
            seed: 8,
            ..EncoderConfig::default()
        };
        let e3 = PatchEncoder::new(&cfg).unwrap();
        assert_ne!(e1.param_hash(), e3.param_hash());
    }
}
