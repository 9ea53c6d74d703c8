//! Synthetic class-conditioned images standing in for natural datasets.
//!
//! Each class owns a fixed template: a bright square with a class hue at a
//! class-indexed grid position. A sample is that template drawn with a
//! little position, contrast and chroma jitter over a randomly tinted
//! background, plus chroma-only distractor squares and Gaussian pixel
//! noise, clipped to `[0,1]`. Class identity is carried mostly by
//! luminance, so it survives grayscale and color-jitter views.
//! Templates depend only on `(num_classes, image_size)`, so batches drawn
//! with different seeds share the same class definitions.

use ndarray::Array4;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ImageBatch;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyRecipe {
    /// Side of the class square as a fraction of the image side.
    pub square_fraction: f64,
    /// Mean luminance step between class square and background.
    pub contrast: f64,
    /// Weight of the class hue relative to the luminance step.
    pub hue: f64,
    /// Std of the per-sample, per-channel tint of the class square,
    /// relative to the luminance step.
    pub chroma_jitter: f64,
    /// Per-sample multiplicative jitter on the contrast.
    pub contrast_jitter: f64,
    /// Maximum shift (pixels) of the class square.
    pub position_jitter: usize,
    /// Std of the per-sample, per-channel background tint around 0.5.
    pub background_jitter: f64,
    /// Number of zero-luminance colored distractor squares per image.
    pub distractors: usize,
    /// Amplitude of the distractor colors.
    pub distractor_contrast: f64,
    /// Gaussian pixel noise.
    pub noise_sigma: f64,
}

impl Default for ToyRecipe {
    fn default() -> Self {
        Self {
            square_fraction: 0.2,
            contrast: 0.1,
            hue: 2.5,
            chroma_jitter: 0.0,
            contrast_jitter: 0.0,
            position_jitter: 2,
            background_jitter: 0.0,
            distractors: 2,
            distractor_contrast: 0.2,
            noise_sigma: 0.05,
        }
    }
}

impl ToyRecipe {
    /// Linearly learnable recipe: fixed template plus pixel noise only.
    pub fn plain() -> Self {
        Self {
            square_fraction: 0.25,
            contrast: 0.4,
            hue: 0.3,
            chroma_jitter: 0.0,
            contrast_jitter: 0.0,
            position_jitter: 0,
            background_jitter: 0.0,
            distractors: 0,
            distractor_contrast: 0.0,
            noise_sigma: 0.05,
        }
    }
}

fn class_color(k: usize, num_classes: usize) -> [f64; 3] {
    // Evenly spaced hues on the color wheel, signed around zero.
    let h = k as f64 / num_classes as f64 * std::f64::consts::TAU;
    [
        h.cos(),
        (h - std::f64::consts::TAU / 3.0).cos(),
        (h + std::f64::consts::TAU / 3.0).cos(),
    ]
}

/// Top-left corner of class `k`'s square: centered in cell `k` of a
/// `ceil(sqrt(K))`-wide grid.
fn class_position(k: usize, num_classes: usize, size: usize, side: usize) -> (usize, usize) {
    let grid = (num_classes as f64).sqrt().ceil() as usize;
    let place = |i: usize| {
        let center = (2 * i + 1) * size / (2 * grid);
        center.saturating_sub(side / 2).min(size - side)
    };
    (place(k / grid), place(k % grid))
}

pub fn make_toy_dataset(
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<ImageBatch> {
    make_toy_with(&ToyRecipe::default(), "toy", num_classes, per_class, image_size, seed)
}

/// Train and test sets drawn from the same class templates with
/// independent sample streams.
pub fn make_toy_split(
    recipe: &ToyRecipe,
    num_classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<(ImageBatch, ImageBatch)> {
    let train = make_toy_with(
        recipe,
        "toy-train",
        num_classes,
        train_per_class,
        image_size,
        seed::derive(seed, "train"),
    )?;
    let test = make_toy_with(
        recipe,
        "toy-test",
        num_classes,
        test_per_class,
        image_size,
        seed::derive(seed, "test"),
    )?;
    Ok((train, test))
}

pub fn make_toy_with(
    recipe: &ToyRecipe,
    name: &str,
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<ImageBatch> {
    if num_classes < 2 {
        return Err(Error::arg("num_classes must be >= 2"));
    }
    if per_class < 2 {
        return Err(Error::arg("per_class must be >= 2"));
    }
    if image_size < 8 {
        return Err(Error::arg("image_size must be >= 8"));
    }
    let n = num_classes * per_class;
    let side = ((image_size as f64 * recipe.square_fraction).round() as usize).clamp(1, image_size);
    let mut rng = seed::rng(seed);
    let noise = Normal::new(0.0, recipe.noise_sigma.max(0.0))
        .map_err(|e| Error::arg(e.to_string()))?;
    let tint = Normal::new(0.0, recipe.background_jitter.max(0.0))
        .map_err(|e| Error::arg(e.to_string()))?;
    let chroma = Normal::new(0.0, 1.0).map_err(|e| Error::arg(e.to_string()))?;

    let mut px = Array4::<f64>::zeros((n, 3, image_size, image_size));
    let mut labels = Vec::with_capacity(n);
    let paint = |px: &mut Array4<f64>, i: usize, r0: usize, c0: usize, color: [f64; 3], amp: f64| {
        for (ch, col) in color.iter().enumerate() {
            for r in r0..(r0 + side).min(image_size) {
                for c in c0..(c0 + side).min(image_size) {
                    px[[i, ch, r, c]] += amp * col;
                }
            }
        }
    };
    for i in 0..n {
        let y = i / per_class;
        labels.push(y);
        for ch in 0..3 {
            let t = 0.5 + tint.sample(&mut rng);
            px.slice_mut(ndarray::s![i, ch, .., ..]).fill(t);
        }
        for _ in 0..recipe.distractors {
            let color = class_color(rng.random_range(0..num_classes * 8), num_classes * 8);
            let r0 = rng.random_range(0..=image_size - side);
            let c0 = rng.random_range(0..=image_size - side);
            let amp = recipe.distractor_contrast * rng.random_range(0.5..1.0);
            paint(&mut px, i, r0, c0, color, amp);
        }
        let (br, bc) = class_position(y, num_classes, image_size, side);
        let j = recipe.position_jitter as i64;
        let shift = |b: usize, rng: &mut seed::Rng| {
            let d = if j > 0 { rng.random_range(-j..=j) } else { 0 };
            (b as i64 + d).clamp(0, (image_size - side) as i64) as usize
        };
        let r0 = shift(br, &mut rng);
        let c0 = shift(bc, &mut rng);
        let amp = recipe.contrast * (1.0 + recipe.contrast_jitter * (rng.random::<f64>() * 2.0 - 1.0));
        let hue = class_color(y, num_classes);
        let mut color = [0.0; 3];
        for (ch, v) in color.iter_mut().enumerate() {
            *v = 1.0 + recipe.hue * hue[ch] + recipe.chroma_jitter * chroma.sample(&mut rng);
        }
        paint(&mut px, i, r0, c0, color, amp);
        for v in px.slice_mut(ndarray::s![i, .., .., ..]).iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let pixels = px.mapv(|v| v.clamp(0.0, 1.0) as f32);
    let ids = (0..n).map(|i| format!("{name}-{i}")).collect();
    ImageBatch::new(pixels, labels, ids, num_classes)
}
