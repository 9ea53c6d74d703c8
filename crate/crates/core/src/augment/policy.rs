//! Stochastic view pipelines for SSL pretraining, linear probing and test.

use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::seed;

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum Stage {
    /// Crop a random region covering `scale` of the area with aspect
    /// ratio in `ratio` (log-uniform), then resize to `size×size`.
    RandomResizedCrop {
        size: usize,
        scale: (f64, f64),
        ratio: (f64, f64),
    },
    /// Zero-pad by `padding` on every side, then crop `size×size` at a
    /// uniformly drawn offset.
    RandomCrop {
        size: usize,
        padding: usize,
    },
    HorizontalFlip {
        prob: f64,
    },
    /// Brightness, contrast and saturation factors drawn from
    /// `[1−s, 1+s]`; hue rotation from `[−hue, hue]` turns.
    ColorJitter {
        prob: f64,
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue: f64,
    },
    Grayscale {
        prob: f64,
    },
    GaussianBlur {
        prob: f64,
        sigma: (f64, f64),
        kernel: usize,
    },
    /// Bilinear resize to `size×size`.
    Resize {
        size: usize,
    },
    CenterCrop {
        size: usize,
    },
}

/// Ordered augmentation stages plus the seed of their random streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub stages: Vec<Stage>,
    pub seed: u64,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            stages: Vec::new(),
            seed: 0,
        }
    }

    /// Crop, color jitter, grayscale, blur and flip.
    pub fn pretrain(size: usize, seed: u64) -> Self {
        Self {
            stages: vec![
                Stage::RandomResizedCrop {
                    size,
                    scale: (0.5, 1.0),
                    ratio: (3.0 / 4.0, 4.0 / 3.0),
                },
                Stage::ColorJitter {
                    prob: 0.8,
                    brightness: 0.4,
                    contrast: 0.4,
                    saturation: 0.4,
                    hue: 0.1,
                },
                Stage::Grayscale { prob: 0.2 },
                Stage::GaussianBlur {
                    prob: 0.5,
                    sigma: (0.1, 2.0),
                    kernel: 3,
                },
                Stage::HorizontalFlip { prob: 0.5 },
            ],
            seed,
        }
    }

    /// Crop and flip.
    pub fn lin_probe(size: usize, seed: u64) -> Self {
        Self {
            stages: vec![
                Stage::RandomResizedCrop {
                    size,
                    scale: (0.5, 1.0),
                    ratio: (3.0 / 4.0, 4.0 / 3.0),
                },
                Stage::HorizontalFlip { prob: 0.5 },
            ],
            seed,
        }
    }

    /// Padded random crop and flip, the usual supervised pipeline for small
    /// images.
    pub fn sl_crop(size: usize, padding: usize, seed: u64) -> Self {
        Self {
            stages: vec![
                Stage::RandomCrop { size, padding },
                Stage::HorizontalFlip { prob: 0.5 },
            ],
            seed,
        }
    }

    /// Deterministic resize then center crop.
    pub fn test(size: usize) -> Self {
        Self {
            stages: vec![Stage::Resize { size }, Stage::CenterCrop { size }],
            seed: 0,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            stages: self.stages.clone(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64, what: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::arg(format!("{what} probability {p} outside [0,1]")))
            }
        };
        for st in &self.stages {
            match st {
                Stage::RandomResizedCrop { size, scale, ratio } => {
                    if *size == 0 {
                        return Err(Error::arg("crop size must be >= 1"));
                    }
                    if !(scale.0 > 0.0 && scale.0 <= scale.1 && scale.1 <= 1.0) {
                        return Err(Error::arg(format!("crop scale {scale:?} not within (0,1]")));
                    }
                    if !(ratio.0 > 0.0 && ratio.0 <= ratio.1) {
                        return Err(Error::arg(format!("invalid crop ratio {ratio:?}")));
                    }
                }
                Stage::HorizontalFlip { prob: p } => prob(*p, "flip")?,
                Stage::ColorJitter { prob: p, .. } => prob(*p, "color jitter")?,
                Stage::Grayscale { prob: p } => prob(*p, "grayscale")?,
                Stage::GaussianBlur {
                    prob: p,
                    sigma,
                    kernel,
                } => {
                    prob(*p, "blur")?;
                    if kernel % 2 == 0 {
                        return Err(Error::arg("blur kernel must be odd"));
                    }
                    if !(sigma.0 > 0.0 && sigma.0 <= sigma.1) {
                        return Err(Error::arg(format!("invalid blur sigma {sigma:?}")));
                    }
                }
                Stage::Resize { size } | Stage::CenterCrop { size } | Stage::RandomCrop { size, .. } => {
                    if *size == 0 {
                        return Err(Error::arg("resize/crop size must be >= 1"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-sample stream keyed by `(seed, view, id)`.
fn sample_rng(seed: u64, view: usize, id: &str) -> seed::Rng {
    seed::rng(seed::derive(seed::derive_index(seed, view as u64), id))
}

/// Draw `views` independent augmentations of every sample.
pub fn apply_policy(policy: &AugmentPolicy, batch: &ImageBatch, views: usize) -> Result<Vec<ImageBatch>> {
    if views == 0 {
        return Err(Error::arg("views must be >= 1"));
    }
    policy.validate()?;
    let [_, _, h, w] = batch.dims();
    let mut side = (h, w);
    for st in &policy.stages {
        match st {
            Stage::CenterCrop { size } => {
                if *size > side.0 || *size > side.1 {
                    return Err(Error::arg(format!(
                        "center crop {size} larger than image {}×{}",
                        side.0, side.1
                    )));
                }
                side = (*size, *size);
            }
            Stage::RandomCrop { size, padding } => {
                if *size > side.0 + 2 * padding || *size > side.1 + 2 * padding {
                    return Err(Error::arg(format!(
                        "random crop {size} larger than padded image {}×{}",
                        side.0 + 2 * padding,
                        side.1 + 2 * padding
                    )));
                }
                side = (*size, *size);
            }
            Stage::RandomResizedCrop { size, .. } | Stage::Resize { size } => side = (*size, *size),
            _ => {}
        }
    }
    let mut out = Vec::with_capacity(views);
    for v in 0..views {
        let imgs: Vec<Array3<f32>> = (0..batch.len())
            .map(|i| {
                let mut rng = sample_rng(policy.seed, v, &batch.ids()[i]);
                let mut img = batch.image(i).to_owned();
                for st in &policy.stages {
                    img = apply_stage(st, img, &mut rng);
                }
                img
            })
            .collect();
        let c = batch.dims()[1];
        let mut px = Array4::zeros((batch.len(), c, side.0, side.1));
        for (i, img) in imgs.into_iter().enumerate() {
            px.index_axis_mut(Axis(0), i).assign(&img);
        }
        out.push(ImageBatch::new(
            px.mapv(|p| p.clamp(0.0, 1.0)),
            batch.labels().to_vec(),
            batch.ids().to_vec(),
            batch.num_classes(),
        )?);
    }
    Ok(out)
}

fn apply_stage(st: &Stage, img: Array3<f32>, rng: &mut seed::Rng) -> Array3<f32> {
    match st {
        Stage::RandomResizedCrop { size, scale, ratio } => {
            let (_, h, w) = img.dim();
            let (r0, c0, ch, cw) = sample_crop(h, w, *scale, *ratio, rng);
            resize_bilinear(img.slice(s![.., r0..r0 + ch, c0..c0 + cw]), *size, *size)
        }
        Stage::RandomCrop { size, padding } => {
            let (c, h, w) = img.dim();
            let mut padded = Array3::zeros((c, h + 2 * padding, w + 2 * padding));
            padded
                .slice_mut(s![.., *padding..padding + h, *padding..padding + w])
                .assign(&img);
            let r0 = rng.random_range(0..=h + 2 * padding - size);
            let c0 = rng.random_range(0..=w + 2 * padding - size);
            padded.slice(s![.., r0..r0 + size, c0..c0 + size]).to_owned()
        }
        Stage::HorizontalFlip { prob } => {
            if rng.random::<f64>() < *prob {
                img.slice(s![.., .., ..;-1]).to_owned()
            } else {
                img
            }
        }
        Stage::ColorJitter {
            prob,
            brightness,
            contrast,
            saturation,
            hue,
        } => {
            if rng.random::<f64>() < *prob {
                let mut f = |s: f64| {
                    if s > 0.0 {
                        rng.random_range((1.0 - s).max(0.0)..=1.0 + s) as f32
                    } else {
                        1.0
                    }
                };
                let (b, c, sat) = (f(*brightness), f(*contrast), f(*saturation));
                let hshift = if *hue > 0.0 {
                    rng.random_range(-*hue..=*hue) as f32
                } else {
                    0.0
                };
                color_jitter(img, b, c, sat, hshift)
            } else {
                img
            }
        }
        Stage::Grayscale { prob } => {
            if rng.random::<f64>() < *prob {
                to_grayscale(img.view())
            } else {
                img
            }
        }
        Stage::GaussianBlur {
            prob,
            sigma,
            kernel,
        } => {
            if rng.random::<f64>() < *prob {
                let sg = rng.random_range(sigma.0..=sigma.1);
                gaussian_blur(&img, sg, *kernel)
            } else {
                img
            }
        }
        Stage::Resize { size } => resize_bilinear(img.view(), *size, *size),
        Stage::CenterCrop { size } => {
            let (_, h, w) = img.dim();
            let (r0, c0) = ((h - size) / 2, (w - size) / 2);
            img.slice(s![.., r0..r0 + size, c0..c0 + size]).to_owned()
        }
    }
}

fn sample_crop(
    h: usize,
    w: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut seed::Rng,
) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let log_r = rng.random_range(ratio.0.ln()..=ratio.1.ln());
        let ar = log_r.exp();
        let cw = (target * ar).sqrt().round() as usize;
        let ch = (target / ar).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let r0 = rng.random_range(0..=h - ch);
            let c0 = rng.random_range(0..=w - cw);
            return (r0, c0, ch, cw);
        }
    }
    (0, 0, h, w)
}

/// Bilinear resize with half-pixel centers; same-size input is copied.
pub fn resize_bilinear(img: ArrayView3<'_, f32>, oh: usize, ow: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    if h == oh && w == ow {
        return img.to_owned();
    }
    let mut out = Array3::zeros((c, oh, ow));
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for r in 0..oh {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = (fy - y0 as f64) as f32;
        for col in 0..ow {
            let fx = ((col as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = (fx - x0 as f64) as f32;
            for ch in 0..c {
                let top = img[[ch, y0, x0]] * (1.0 - wx) + img[[ch, y0, x1]] * wx;
                let bot = img[[ch, y1, x0]] * (1.0 - wx) + img[[ch, y1, x1]] * wx;
                out[[ch, r, col]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// ITU-R 601 luma replicated across channels. Single-channel images are
/// returned unchanged.
pub fn to_grayscale(img: ArrayView3<'_, f32>) -> Array3<f32> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return img.to_owned();
    }
    let mut out = Array3::zeros((c, h, w));
    for r in 0..h {
        for col in 0..w {
            let (rr, gg, bb) = (img[[0, r, col]], img[[1, r, col]], img[[2, r, col]]);
            let y = if rr == gg && gg == bb {
                rr
            } else {
                LUMA[0] * rr + LUMA[1] * gg + LUMA[2] * bb
            };
            for ch in 0..3 {
                out[[ch, r, col]] = y;
            }
        }
    }
    out
}

fn color_jitter(mut img: Array3<f32>, brightness: f32, contrast: f32, saturation: f32, hue: f32) -> Array3<f32> {
    img.mapv_inplace(|v| (v * brightness).clamp(0.0, 1.0));
    let mean = to_grayscale(img.view()).mean().unwrap_or(0.0);
    img.mapv_inplace(|v| (mean + contrast * (v - mean)).clamp(0.0, 1.0));
    if img.dim().0 == 3 {
        let gray = to_grayscale(img.view());
        img.zip_mut_with(&gray, |v, g| *v = (g + saturation * (*v - g)).clamp(0.0, 1.0));
        if hue != 0.0 {
            img = rotate_hue(img, hue);
        }
    }
    img
}

/// Hue rotation by `turns` of a full circle in YIQ space.
fn rotate_hue(img: Array3<f32>, turns: f32) -> Array3<f32> {
    let (_, h, w) = img.dim();
    let th = turns * std::f32::consts::TAU;
    let (cs, sn) = (th.cos(), th.sin());
    let mut out = Array3::zeros(img.dim());
    for r in 0..h {
        for c in 0..w {
            let (rr, gg, bb) = (img[[0, r, c]], img[[1, r, c]], img[[2, r, c]]);
            let y = 0.299 * rr + 0.587 * gg + 0.114 * bb;
            let i = 0.596 * rr - 0.274 * gg - 0.322 * bb;
            let q = 0.211 * rr - 0.523 * gg + 0.312 * bb;
            let (i2, q2) = (i * cs - q * sn, i * sn + q * cs);
            out[[0, r, c]] = (y + 0.956 * i2 + 0.621 * q2).clamp(0.0, 1.0);
            out[[1, r, c]] = (y - 0.272 * i2 - 0.647 * q2).clamp(0.0, 1.0);
            out[[2, r, c]] = (y - 1.106 * i2 + 1.703 * q2).clamp(0.0, 1.0);
        }
    }
    out
}

/// Separable Gaussian blur with edge replication.
fn gaussian_blur(img: &Array3<f32>, sigma: f64, kernel: usize) -> Array3<f32> {
    let half = (kernel / 2) as isize;
    let mut k: Vec<f32> = (-half..=half)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let (c, h, w) = img.dim();
    let mut tmp = Array3::zeros((c, h, w));
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let cc = (col as isize + j as isize - half).clamp(0, w as isize - 1) as usize;
                    acc += kv * img[[ch, r, cc]];
                }
                tmp[[ch, r, col]] = acc;
            }
        }
        for r in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let rr = (r as isize + j as isize - half).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[[ch, rr, col]];
                }
                out[[ch, r, col]] = acc;
            }
        }
    }
    out
}
