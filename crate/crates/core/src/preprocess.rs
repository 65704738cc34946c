//! Image standardization and deterministic augmentation.
//!
//! All transforms are pure functions of `(image, spec)`: equal inputs give
//! bit-identical outputs, which makes cached pipeline runs reproducible.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Standard side length every image is resized to before evaluation.
pub const STANDARD_SIZE: u32 = 300;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("image has zero dimension ({width}x{height})")]
    ZeroDimension { width: u32, height: u32 },
    #[error("augmentation field {field} = {value} outside legal range {range}")]
    OutOfRange {
        field: &'static str,
        value: f32,
        range: &'static str,
    },
    #[error("cannot decode {path}: {source}")]
    Decode {
        path: String,
        source: image::ImageError,
    },
    #[error("image encode failed: {0}")]
    Encode(image::ImageError),
}

/// One deterministic augmentation recipe.
///
/// `brightness_delta` is a fraction of full scale (0.1 lifts every channel by
/// 25.5 intensity units), `contrast_gain` scales around mid-gray,
/// `blur_sigma` is in pixels, `noise_sigma` in 0–255 intensity units.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentationSpec {
    pub hflip: bool,
    pub vflip: bool,
    pub brightness_delta: f32,
    pub contrast_gain: f32,
    pub blur_sigma: f32,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl AugmentationSpec {
    /// The identity recipe: no flips, neutral photometry, no blur or noise.
    pub fn neutral(seed: u64) -> Self {
        AugmentationSpec {
            hflip: false,
            vflip: false,
            brightness_delta: 0.0,
            contrast_gain: 1.0,
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        let checks: [(&'static str, f32, f32, f32, &'static str); 4] = [
            ("brightness_delta", self.brightness_delta, -0.5, 0.5, "[-0.5, 0.5]"),
            ("contrast_gain", self.contrast_gain, 0.5, 2.0, "[0.5, 2.0]"),
            ("blur_sigma", self.blur_sigma, 0.0, f32::INFINITY, "[0, inf)"),
            ("noise_sigma", self.noise_sigma, 0.0, f32::INFINITY, "[0, inf)"),
        ];
        for (field, value, lo, hi, range) in checks {
            if !value.is_finite() || value < lo || value > hi {
                return Err(PreprocessError::OutOfRange { field, value, range });
            }
        }
        Ok(())
    }
}

/// Decodes an image file into 8-bit RGB.
pub fn load_rgb(path: &Path) -> Result<RgbImage, PreprocessError> {
    image::open(path)
        .map(DynamicImage::into_rgb8)
        .map_err(|source| PreprocessError::Decode {
            path: path.display().to_string(),
            source,
        })
}

/// Encodes an image as PNG into memory.
pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>, PreprocessError> {
    let mut bytes = Vec::new();
    image
        .write_to(
            &mut std::io::Cursor::new(&mut bytes),
            image::ImageFormat::Png,
        )
        .map_err(PreprocessError::Encode)?;
    Ok(bytes)
}

/// Resizes to 300×300 with bilinear resampling.
///
/// A 300×300 input is returned as an exact pixel copy so repeated
/// standardization is stable.
pub fn resize_standard(image: &RgbImage) -> Result<RgbImage, PreprocessError> {
    let (width, height) = image.dimensions();
    if width == 0 || height == 0 {
        return Err(PreprocessError::ZeroDimension { width, height });
    }
    if width == STANDARD_SIZE && height == STANDARD_SIZE {
        return Ok(image.clone());
    }
    Ok(image::imageops::resize(
        image,
        STANDARD_SIZE,
        STANDARD_SIZE,
        FilterType::Triangle,
    ))
}

/// Applies `spec` in the fixed order hflip → vflip → brightness → contrast →
/// blur → noise, then clamps to 0–255.
///
/// Intended for standardized 300×300 images; geometry of any input is
/// preserved. Noise is drawn per channel, row-major, from a ChaCha20 stream
/// seeded with `spec.seed`, so equal `(image, spec)` are bit-identical.
pub fn apply_augmentation(
    image: &RgbImage,
    spec: &AugmentationSpec,
) -> Result<RgbImage, PreprocessError> {
    spec.validate()?;
    let mut flipped = image.clone();
    if spec.hflip {
        image::imageops::flip_horizontal_in_place(&mut flipped);
    }
    if spec.vflip {
        image::imageops::flip_vertical_in_place(&mut flipped);
    }

    let (width, height) = flipped.dimensions();
    let mut values: Vec<f32> = flipped.as_raw().iter().map(|&v| v as f32).collect();

    if spec.brightness_delta != 0.0 {
        let delta = spec.brightness_delta * 255.0;
        for v in &mut values {
            *v += delta;
        }
    }
    if spec.contrast_gain != 1.0 {
        for v in &mut values {
            *v = (*v - 127.5) * spec.contrast_gain + 127.5;
        }
    }
    if spec.blur_sigma > 0.0 {
        values = separable_blur(&values, width as usize, height as usize, spec.blur_sigma);
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0f32, spec.noise_sigma).expect("validated sigma");
        for v in &mut values {
            *v += normal.sample(&mut rng);
        }
    }

    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(RgbImage::from_raw(width, height, bytes).expect("buffer length preserved"))
}

/// Two-pass Gaussian convolution over interleaved RGB f32 samples with
/// clamp-to-edge boundaries. Kernel radius is `ceil(3·sigma)`.
fn separable_blur(values: &[f32], width: usize, height: usize, sigma: f32) -> Vec<f32> {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut horizontal = vec![0.0f32; values.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let mut acc = 0.0f32;
                for (k, &w) in kernel.iter().enumerate() {
                    let sx = (x as isize + k as isize - radius).clamp(0, width as isize - 1);
                    acc += w * values[(y * width + sx as usize) * 3 + c];
                }
                horizontal[(y * width + x) * 3 + c] = acc;
            }
        }
    }
    let mut vertical = vec![0.0f32; values.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let mut acc = 0.0f32;
                for (k, &w) in kernel.iter().enumerate() {
                    let sy = (y as isize + k as isize - radius).clamp(0, height as isize - 1);
                    acc += w * horizontal[(sy as usize * width + x) * 3 + c];
                }
                vertical[(y * width + x) * 3 + c] = acc;
            }
        }
    }
    vertical
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let denom = 2.0 * sigma * sigma;
    let mut weights: Vec<f32> = (-radius..=radius)
        .map(|i| (-((i * i) as f32) / denom).exp())
        .collect();
    let sum: f32 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    weights
}

/// Flattens an image to row-major RGB f32 with min-max scaling to [0, 1].
/// Constant images map to all zeros.
pub fn to_unit_tensor(image: &RgbImage) -> Vec<f32> {
    let raw = image.as_raw();
    let min = raw.iter().copied().min().unwrap_or(0) as f32;
    let max = raw.iter().copied().max().unwrap_or(0) as f32;
    if max <= min {
        return vec![0.0; raw.len()];
    }
    let span = max - min;
    raw.iter().map(|&v| (v as f32 - min) / span).collect()
}
