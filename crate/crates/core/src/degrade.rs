//! Synthetic degradation: blur → downsample → noise → JPEG → upsample.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::resize_bilinear_raw;
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::rng::{purpose, stream};

/// Blur sigmas below this are treated as this value; the kernel is then a delta
/// to well below `f64` resolution.
pub const MIN_BLUR_SIGMA: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecipe {
    pub blur_sigma: f64,
    pub down_factor: f64,
    pub noise_sigma: f64,
    pub jpeg_quality: u8,
    pub seed: u64,
}

impl DegradationRecipe {
    /// The mildest recipe: negligible blur, no resampling, no noise, quality 100.
    pub fn identity(seed: u64) -> Self {
        Self { blur_sigma: MIN_BLUR_SIGMA, down_factor: 1.0, noise_sigma: 0.0, jpeg_quality: 100, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma > 0.0) || !self.blur_sigma.is_finite() {
            return Err(Error::invalid(format!("blur_sigma must be > 0, got {}", self.blur_sigma)));
        }
        if !(self.down_factor >= 1.0) || !self.down_factor.is_finite() {
            return Err(Error::invalid(format!("down_factor must be >= 1, got {}", self.down_factor)));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::invalid(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        check_quality(self.jpeg_quality)
    }
}

/// Inclusive ranges a per-example recipe is sampled from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DegradationRanges {
    pub blur_sigma: (f64, f64),
    pub down_factor: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub jpeg_quality: (u8, u8),
    /// Apply the chain a second time with an independently sampled recipe.
    pub second_order: bool,
}

impl Default for DegradationRanges {
    fn default() -> Self {
        Self {
            blur_sigma: (0.2, 10.0),
            down_factor: (1.0, 8.0),
            noise_sigma: (0.0, 0.08),
            jpeg_quality: (30, 90),
            second_order: false,
        }
    }
}

impl DegradationRanges {
    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, (lo, hi): (f64, f64)| {
            if lo <= hi && lo.is_finite() && hi.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} range [{lo}, {hi}] is empty")))
            }
        };
        ordered("blur_sigma", self.blur_sigma)?;
        ordered("down_factor", self.down_factor)?;
        ordered("noise_sigma", self.noise_sigma)?;
        if self.jpeg_quality.0 > self.jpeg_quality.1 {
            return Err(Error::invalid("jpeg_quality range is empty"));
        }
        let lo = DegradationRecipe {
            blur_sigma: self.blur_sigma.0,
            down_factor: self.down_factor.0,
            noise_sigma: self.noise_sigma.0,
            jpeg_quality: self.jpeg_quality.0,
            seed: 0,
        };
        lo.validate()?;
        check_quality(self.jpeg_quality.1)
    }

    /// Uniformly samples a recipe; the stream is keyed by `(seed, path)`.
    pub fn sample(&self, seed: u64, path: &[u64]) -> DegradationRecipe {
        let mut key = path.to_vec();
        key.push(purpose::RECIPE);
        let mut rng = stream(seed, &key);
        let uni = |rng: &mut crate::rng::Stream, (lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        let blur_sigma = uni(&mut rng, self.blur_sigma);
        let down_factor = uni(&mut rng, self.down_factor);
        let noise_sigma = uni(&mut rng, self.noise_sigma);
        let jpeg_quality = rng.random_range(self.jpeg_quality.0..=self.jpeg_quality.1);
        let seed = rng.random();
        DegradationRecipe { blur_sigma, down_factor, noise_sigma, jpeg_quality, seed }
    }
}

/// Encode/decode round trip through a lossy image codec.
pub trait LossyCodec {
    fn round_trip(&self, img: &ImageGrid, quality: u8) -> Result<ImageGrid>;
}

/// Stand-in codec that returns its input unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct Lossless;

impl LossyCodec for Lossless {
    fn round_trip(&self, img: &ImageGrid, _quality: u8) -> Result<ImageGrid> {
        Ok(img.clone())
    }
}

fn check_quality(q: u8) -> Result<()> {
    if (1..=100).contains(&q) {
        Ok(())
    } else {
        Err(Error::invalid(format!("jpeg_quality must be in [1, 100], got {q}")))
    }
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let sigma = sigma.max(MIN_BLUR_SIGMA);
    let r = (libm::ceil(3.0 * sigma) as usize).max(1);
    let mut k: Vec<f64> = (0..=2 * r)
        .map(|i| {
            let x = i as f64 - r as f64;
            libm::exp(-x * x / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with reflective borders.
pub fn gaussian_blur(img: &ImageGrid, sigma: f64) -> Result<ImageGrid> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("blur sigma must be > 0, got {sigma}")));
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w, c) = img.dims();
    let src = img.data();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for (t, kv) in k.iter().enumerate() {
                let sx = reflect(x as isize + t as isize - r, w);
                for ch in 0..c {
                    tmp[(y * w + x) * c + ch] += kv * src[(y * w + sx) * c + ch];
                }
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for (t, kv) in k.iter().enumerate() {
            let sy = reflect(y as isize + t as isize - r, h);
            for x in 0..w {
                for ch in 0..c {
                    out[(y * w + x) * c + ch] += kv * tmp[(sy * w + x) * c + ch];
                }
            }
        }
    }
    ImageGrid::new(h, w, c, out).map(|i| i.clamp01())
}

/// Bilinear resize to an explicit size (half-pixel centers).
pub fn resize(img: &ImageGrid, out_h: usize, out_w: usize) -> Result<ImageGrid> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be at least 1×1"));
    }
    let (h, w, c) = img.dims();
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    ImageGrid::new(out_h, out_w, c, resize_bilinear_raw(img.data(), h, w, c, out_h, out_w))
}

/// Bilinear downsampling to `floor(dim / factor)`.
pub fn downsample(img: &ImageGrid, factor: f64) -> Result<ImageGrid> {
    if !(factor >= 1.0) || !factor.is_finite() {
        return Err(Error::invalid(format!("downsample factor must be >= 1, got {factor}")));
    }
    let oh = libm::floor(img.height() as f64 / factor) as usize;
    let ow = libm::floor(img.width() as f64 / factor) as usize;
    if oh == 0 || ow == 0 {
        return Err(Error::invalid(format!(
            "factor {factor} reduces {}×{} below 1×1",
            img.height(),
            img.width()
        )));
    }
    resize(img, oh, ow)
}

/// `clamp(img + n, 0, 1)` with `n ~ N(0, sigma^2)` drawn from `rng`.
pub fn add_gaussian_noise<R: Rng + ?Sized>(img: &ImageGrid, sigma: f64, rng: &mut R) -> Result<ImageGrid> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut out = img.clone();
    for v in out.data_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *v = (*v + sigma * n).clamp(0.0, 1.0);
    }
    Ok(out)
}

pub fn jpeg_compress(img: &ImageGrid, quality: u8, codec: &dyn LossyCodec) -> Result<ImageGrid> {
    check_quality(quality)?;
    let out = codec.round_trip(img, quality)?;
    if out.dims() != img.dims() {
        return Err(Error::ShapeMismatch {
            op: "jpeg round trip",
            left: img.tensor().shape().to_vec(),
            right: out.tensor().shape().to_vec(),
        });
    }
    Ok(out.clamp01())
}

/// Full single-pass chain, resized back to the input size.
pub fn degrade(img: &ImageGrid, recipe: &DegradationRecipe, codec: &dyn LossyCodec) -> Result<ImageGrid> {
    recipe.validate()?;
    let (h, w, _) = img.dims();
    let blurred = gaussian_blur(img, recipe.blur_sigma)?;
    let small = downsample(&blurred, recipe.down_factor)?;
    let mut rng = stream(recipe.seed, &[purpose::NOISE]);
    let noisy = add_gaussian_noise(&small, recipe.noise_sigma, &mut rng)?;
    let compressed = jpeg_compress(&noisy, recipe.jpeg_quality, codec)?;
    Ok(resize(&compressed, h, w)?.clamp01())
}

/// Samples a recipe for example `path` and applies it (twice when `second_order` is set).
pub fn degrade_sampled(
    img: &ImageGrid,
    ranges: &DegradationRanges,
    seed: u64,
    path: &[u64],
    codec: &dyn LossyCodec,
) -> Result<ImageGrid> {
    let first = ranges.sample(seed, path);
    let out = degrade(img, &first, codec)?;
    if !ranges.second_order {
        return Ok(out);
    }
    let mut second_path = path.to_vec();
    second_path.push(purpose::DEGRADE);
    let second = ranges.sample(seed, &second_path);
    degrade(&out, &second, codec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageGrid {
        ImageGrid::from_fn(h, w, 3, |y, x, c| ((y * 7 + x * 3 + c * 5) % 17) as f64 / 16.0)
    }

    #[test]
    fn reflect_indexing() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, [3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn kernel_sums_to_one() {
        for s in [0.3, 1.0, 4.5] {
            let k = gaussian_kernel(s);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_rejects_non_positive_sigma() {
        assert!(gaussian_blur(&ramp(4, 4), 0.0).is_err());
        assert!(gaussian_blur(&ramp(4, 4), -1.0).is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let img = ImageGrid::filled(9, 7, 3, 0.37);
        let out = gaussian_blur(&img, 2.5).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn tiny_sigma_is_identity() {
        let img = ramp(3, 3);
        let out = gaussian_blur(&img, 1e-9).unwrap();
        assert!(out.tensor().max_abs_diff(img.tensor()) < 1e-3);
    }

    #[test]
    fn downsample_shapes_and_errors() {
        assert_eq!(downsample(&ramp(8, 8), 2.0).unwrap().dims(), (4, 4, 3));
        assert_eq!(downsample(&ramp(9, 10), 3.0).unwrap().dims(), (3, 3, 3));
        assert!(downsample(&ramp(8, 8), 0.5).is_err());
        assert!(downsample(&ramp(4, 4), 5.0).is_err());
        let c = downsample(&ImageGrid::filled(9, 9, 1, 0.6), 3.0).unwrap();
        assert!(c.data().iter().all(|v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn zero_noise_is_exact() {
        let img = ramp(5, 5);
        let out = add_gaussian_noise(&img, 0.0, &mut stream(1, &[])).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn recipe_validation() {
        let mut r = DegradationRecipe::identity(0);
        assert!(r.validate().is_ok());
        r.jpeg_quality = 0;
        assert!(r.validate().is_err());
        r = DegradationRecipe::identity(0);
        r.down_factor = 0.9;
        assert!(r.validate().is_err());
    }

    #[test]
    fn sampled_recipes_stay_in_range() {
        let ranges = DegradationRanges::default();
        for i in 0..200 {
            let r = ranges.sample(3, &[i]);
            assert!((0.2..=10.0).contains(&r.blur_sigma));
            assert!((1.0..=8.0).contains(&r.down_factor));
            assert!((0.0..=0.08).contains(&r.noise_sigma));
            assert!((30..=90).contains(&r.jpeg_quality));
        }
    }
}
