//! Stochastic augmentation pipelines and augmentation-based defenses.

mod policy;

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat};
use ndarray::{s, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::loss::LabelMix;
use crate::seed;

pub use policy::{apply_policy, resize_bilinear, to_grayscale, AugmentPolicy, Stage};

/// Pixels blended from two samples with the matching label weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub pixels: Array4<f32>,
    pub label_pairs: Vec<LabelMix>,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.label_pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label_pairs.is_empty()
    }

    pub fn to_input(&self) -> Array2<f64> {
        let n = self.pixels.shape()[0];
        let d = self.pixels.len() / n.max(1);
        Array2::from_shape_vec((n, d), self.pixels.iter().map(|&v| v as f64).collect())
            .expect("contiguous pixel layout")
    }
}

/// Square hole placement: top-left corner and side, clipped at borders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

fn centered_rect(cy: usize, cx: usize, hh: usize, hw: usize, h: usize, w: usize) -> Rect {
    let top = cy.saturating_sub(hh / 2);
    let left = cx.saturating_sub(hw / 2);
    let bottom = (cy + hh - hh / 2).min(h);
    let right = (cx + hw - hw / 2).min(w);
    Rect {
        top,
        left,
        height: bottom - top,
        width: right - left,
    }
}

/// Zero one square hole per image at a uniformly drawn center.
pub fn cutout(batch: &ImageBatch, hole_size: usize, seed: u64) -> Result<ImageBatch> {
    let [_, _, h, w] = batch.dims();
    if hole_size > h.min(w) {
        return Err(Error::arg(format!(
            "hole size {hole_size} exceeds image side {}",
            h.min(w)
        )));
    }
    let holes: Vec<Rect> = batch
        .ids()
        .iter()
        .map(|id| {
            let mut rng = seed::rng(seed::derive(seed, id));
            let cy = rng.random_range(0..h);
            let cx = rng.random_range(0..w);
            centered_rect(cy, cx, hole_size, hole_size, h, w)
        })
        .collect();
    cutout_at(batch, &holes)
}

/// Zero the given region of each image.
pub fn cutout_at(batch: &ImageBatch, holes: &[Rect]) -> Result<ImageBatch> {
    if holes.len() != batch.len() {
        return Err(Error::arg("one hole per image required"));
    }
    let [_, _, h, w] = batch.dims();
    let mut px = batch.pixels().clone();
    for (i, r) in holes.iter().enumerate() {
        if r.top + r.height > h || r.left + r.width > w {
            return Err(Error::arg(format!("hole {r:?} outside {h}×{w} image")));
        }
        px.slice_mut(s![i, .., r.top..r.top + r.height, r.left..r.left + r.width])
            .fill(0.0);
    }
    batch.with_pixels(px)
}

fn partner_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::rng(seed::derive(seed, "partner")));
    perm
}

fn draw_lambda(alpha: f64, seed: u64) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::arg(format!("mixing alpha must be > 0, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::arg(e.to_string()))?;
    Ok(beta.sample(&mut seed::rng(seed::derive(seed, "lambda"))))
}

/// Convex blend with a permuted partner, `λ ~ Beta(alpha, alpha)`.
pub fn mixup(batch: &ImageBatch, alpha: f64, seed: u64) -> Result<MixedBatch> {
    let lambda = draw_lambda(alpha, seed)?;
    mixup_with(batch, lambda, &partner_permutation(batch.len(), seed))
}

pub fn mixup_with(batch: &ImageBatch, lambda: f64, partner: &[usize]) -> Result<MixedBatch> {
    check_partner(batch, lambda, partner)?;
    let src = batch.pixels();
    let mut px = src.clone();
    let l = lambda as f32;
    for (i, &j) in partner.iter().enumerate() {
        let mut dst = px.index_axis_mut(Axis(0), i);
        dst.zip_mut_with(&src.index_axis(Axis(0), j), |a, &b| {
            *a = (l * *a + (1.0 - l) * b).clamp(0.0, 1.0)
        });
    }
    Ok(MixedBatch {
        pixels: px,
        label_pairs: label_pairs(batch, partner, |_| lambda),
    })
}

/// Paste a partner rectangle covering `1−λ` of the area; the realized area
/// fraction is recorded as the label weight.
pub fn cutmix(batch: &ImageBatch, alpha: f64, seed: u64) -> Result<MixedBatch> {
    let lambda = draw_lambda(alpha, seed)?;
    let [_, _, h, w] = batch.dims();
    let cut = (1.0 - lambda).sqrt();
    let ch = (h as f64 * cut).round() as usize;
    let cw = (w as f64 * cut).round() as usize;
    let mut rng = seed::rng(seed::derive(seed, "box"));
    let cy = rng.random_range(0..h);
    let cx = rng.random_range(0..w);
    let rect = centered_rect(cy, cx, ch, cw, h, w);
    cutmix_with(batch, rect, &partner_permutation(batch.len(), seed))
}

pub fn cutmix_with(batch: &ImageBatch, rect: Rect, partner: &[usize]) -> Result<MixedBatch> {
    check_partner(batch, 1.0, partner)?;
    let [_, _, h, w] = batch.dims();
    if rect.top + rect.height > h || rect.left + rect.width > w {
        return Err(Error::arg(format!("rectangle {rect:?} outside {h}×{w} image")));
    }
    let src = batch.pixels();
    let mut px = src.clone();
    let region = s![.., rect.top..rect.top + rect.height, rect.left..rect.left + rect.width];
    for (i, &j) in partner.iter().enumerate() {
        px.index_axis_mut(Axis(0), i)
            .slice_mut(region)
            .assign(&src.index_axis(Axis(0), j).slice(region));
    }
    let lambda = 1.0 - (rect.height * rect.width) as f64 / (h * w) as f64;
    Ok(MixedBatch {
        pixels: px,
        label_pairs: label_pairs(batch, partner, |_| lambda),
    })
}

fn check_partner(batch: &ImageBatch, lambda: f64, partner: &[usize]) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::arg(format!("lambda {lambda} outside [0,1]")));
    }
    if partner.len() != batch.len() || partner.iter().any(|&j| j >= batch.len()) {
        return Err(Error::arg("partner indices must map into the batch"));
    }
    Ok(())
}

fn label_pairs(batch: &ImageBatch, partner: &[usize], lambda: impl Fn(usize) -> f64) -> Vec<LabelMix> {
    let y = batch.labels();
    partner
        .iter()
        .enumerate()
        .map(|(i, &j)| LabelMix {
            y_a: y[i],
            y_b: y[j],
            lambda: lambda(i),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssMode {
    Grayscale,
    Jpeg,
}

/// Image-shortcut-squeezing pre-transform: grayscale or a JPEG round trip.
pub fn iss_transform(batch: &ImageBatch, mode: IssMode, jpeg_quality: u8) -> Result<ImageBatch> {
    let mut px = batch.pixels().clone();
    match mode {
        IssMode::Grayscale => {
            for (i, mut img) in px.outer_iter_mut().enumerate() {
                img.assign(&to_grayscale(batch.image(i)));
            }
        }
        IssMode::Jpeg => {
            if !(1..=100).contains(&jpeg_quality) {
                return Err(Error::arg(format!("jpeg quality {jpeg_quality} outside [1,100]")));
            }
            let [_, c, h, w] = batch.dims();
            for mut img in px.outer_iter_mut() {
                let coded = jpeg_roundtrip(&img.to_owned(), jpeg_quality)?;
                if coded.len() != c * h * w {
                    return Err(Error::Transform(format!(
                        "decoded {} values, expected {}",
                        coded.len(),
                        c * h * w
                    )));
                }
                for ch in 0..c {
                    for r in 0..h {
                        for col in 0..w {
                            img[[ch, r, col]] = coded[(r * w + col) * c + ch];
                        }
                    }
                }
            }
        }
    }
    batch.with_pixels(px)
}

/// Encode then decode one CHW image; returns interleaved HWC values in [0,1].
fn jpeg_roundtrip(img: &ndarray::Array3<f32>, quality: u8) -> Result<Vec<f32>> {
    let (c, h, w) = img.dim();
    let color = match c {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        _ => return Err(Error::Transform(format!("jpeg needs 1 or 3 channels, got {c}"))),
    };
    let mut raw = Vec::with_capacity(c * h * w);
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                raw.push((img[[ch, r, col]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode(&raw, w as u32, h as u32, color)
        .map_err(|e| Error::Transform(format!("jpeg encode: {e}")))?;
    let decoded = image::load(Cursor::new(buf), ImageFormat::Jpeg)
        .map_err(|e| Error::Transform(format!("jpeg decode: {e}")))?;
    let bytes = if c == 1 {
        decoded.into_luma8().into_raw()
    } else {
        decoded.into_rgb8().into_raw()
    };
    Ok(bytes.into_iter().map(|b| b as f32 / 255.0).collect())
}

/// With probability `prob` per image add `N(0, sigma²)` noise and clip.
pub fn gaussian_noise(batch: &ImageBatch, sigma: f64, prob: f64, seed: u64) -> Result<ImageBatch> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::arg(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::arg(format!("noise probability {prob} outside [0,1]")));
    }
    if sigma == 0.0 || prob == 0.0 {
        return Ok(batch.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::arg(e.to_string()))?;
    let mut px = batch.pixels().clone();
    for (mut img, id) in px.outer_iter_mut().zip(batch.ids()) {
        let mut rng = seed::rng(seed::derive(seed, id));
        if rng.random::<f64>() < prob {
            img.mapv_inplace(|v| (v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32);
        }
    }
    batch.with_pixels(px)
}
