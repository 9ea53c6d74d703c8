//! Class-wise generators: one artifact per class, shared by all its images.

use ndarray::{s, Array3, Array4};
use rand::Rng;
use serde_json::{json, Value};

use super::{check_input, expect_generator, Generator, GeneratorConfig};
use crate::data::{ImageBatch, PoisonedDataset};
use crate::error::{Error, Result};
use crate::seed;

/// Per-class patterns of constant `±ε` blocks, added and clipped.
pub fn craft_lsp(clean: &ImageBatch, cfg: &GeneratorConfig) -> Result<PoisonedDataset> {
    expect_generator(cfg, Generator::Lsp)?;
    check_input(clean)?;
    let [_, c, h, w] = clean.dims();
    let eps = cfg.budget.epsilon as f32;
    let block = cfg.lsp.block.unwrap_or((h.min(w) / 4).max(1));
    let (bh, bw) = (h.div_ceil(block), w.div_ceil(block));
    let k = clean.num_classes();
    let mut rng = seed::rng(seed::derive(cfg.seed, "lsp"));
    // Sign per (class, channel, block row, block col); edge blocks are
    // truncated when `block` does not divide the side.
    let signs: Vec<Array3<i8>> = (0..k)
        .map(|_| Array3::from_shape_fn((c, bh, bw), |_| if rng.random::<bool>() { 1 } else { -1 }))
        .collect();
    let patterns: Vec<Array3<f32>> = signs
        .iter()
        .map(|sg| Array3::from_shape_fn((c, h, w), |(ch, r, col)| f32::from(sg[[ch, r / block, col / block]]) * eps))
        .collect();
    let mut px = clean.pixels().clone();
    for (i, &y) in clean.labels().iter().enumerate() {
        let mut img = px.slice_mut(s![i, .., .., ..]);
        img += &patterns[y];
    }
    let poisoned = clean.with_pixels(px)?;
    let mut prov = cfg.provenance()?;
    prov.insert("block".into(), json!(block));
    prov.insert("norm_interpretation".into(), json!("linf"));
    let signs_json: Vec<Value> = signs.iter().map(|sg| json!(sg.iter().copied().collect::<Vec<i8>>())).collect();
    prov.insert("pattern_shape".into(), json!([c, bh, bw]));
    prov.insert("pattern_signs".into(), Value::Array(signs_json));
    PoisonedDataset::new(clean.clone(), poisoned, cfg.budget, "lsp", prov)
}

/// A pixel chosen for one class: position plus a corner color of the RGB
/// cube.
#[derive(Debug, Clone, Copy, PartialEq)]
struct OnePixel {
    row: usize,
    col: usize,
    color: [f32; 3],
}

/// Pick, per class, the (row, col, channel) where the class mean departs
/// most from the dataset mean; the color pushes every channel further in
/// the direction of that departure. Classes take distinct positions.
fn select_pixels(clean: &ImageBatch) -> Vec<OnePixel> {
    let [n, c, h, w] = clean.dims();
    let k = clean.num_classes();
    let px = clean.pixels();
    let mut total = Array3::<f64>::zeros((c, h, w));
    let mut sums = vec![Array3::<f64>::zeros((c, h, w)); k];
    let mut counts = vec![0usize; k];
    for i in 0..n {
        let img = px.slice(s![i, .., .., ..]).mapv(f64::from);
        total += &img;
        sums[clean.labels()[i]] += &img;
        counts[clean.labels()[i]] += 1;
    }
    total /= n as f64;
    let mut taken = vec![false; h * w];
    let mut out = Vec::with_capacity(k);
    for y in 0..k {
        let dev = if counts[y] == 0 {
            Array3::zeros((c, h, w))
        } else {
            &sums[y] / counts[y] as f64 - &total
        };
        let mut best: Option<(f64, usize, usize)> = None;
        // Row-major scan with strict improvement keeps the lowest index on ties.
        for r in 0..h {
            for col in 0..w {
                if taken[r * w + col] {
                    continue;
                }
                for ch in 0..c {
                    let v = dev[[ch, r, col]].abs();
                    if best.is_none_or(|(b, _, _)| v > b) {
                        best = Some((v, r, col));
                    }
                }
            }
        }
        let (_, row, col) = best.expect("more pixels than classes");
        taken[row * w + col] = true;
        let mut color = [0.0f32; 3];
        for (ch, slot) in color.iter_mut().enumerate().take(c) {
            *slot = if dev[[ch, row, col]] >= 0.0 { 1.0 } else { 0.0 };
        }
        out.push(OnePixel { row, col, color });
    }
    out
}

/// Set one class-specific pixel to a class-specific color.
pub fn craft_ops(clean: &ImageBatch, cfg: &GeneratorConfig) -> Result<PoisonedDataset> {
    expect_generator(cfg, Generator::Ops)?;
    check_input(clean)?;
    let [_, c, h, w] = clean.dims();
    if h * w < clean.num_classes() {
        return Err(Error::arg("fewer pixel positions than classes"));
    }
    let picks = select_pixels(clean);
    let mut px = clean.pixels().clone();
    for (i, &y) in clean.labels().iter().enumerate() {
        let p = picks[y];
        for ch in 0..c {
            px[[i, ch, p.row, p.col]] = p.color[ch.min(2)];
        }
    }
    // A sample that already holds the class color at that pixel (only
    // possible with saturated pixels) would sit at L0 distance 0; flip its
    // first channel so every image carries exactly one changed pixel.
    for (i, &y) in clean.labels().iter().enumerate() {
        let p = picks[y];
        if (0..c).all(|ch| px[[i, ch, p.row, p.col]] == clean.pixels()[[i, ch, p.row, p.col]]) {
            let v = &mut px[[i, 0, p.row, p.col]];
            *v = if *v >= 0.5 { 0.0 } else { 1.0 };
        }
    }
    let poisoned = clean.with_pixels(px)?;
    let mut prov = cfg.provenance()?;
    let pixels: Vec<Value> = picks
        .iter()
        .enumerate()
        .map(|(y, p)| json!({"class": y, "row": p.row, "col": p.col, "color": &p.color[..c.min(3)]}))
        .collect();
    prov.insert("pixels".into(), Value::Array(pixels));
    PoisonedDataset::new(clean.clone(), poisoned, cfg.budget, "ops", prov)
}

/// Identity plus `U(−s, s)` on every tap, rescaled to unit sum. Redraws
/// when the raw sum is too close to zero to rescale.
fn draw_kernel(side: usize, noise: f64, rng: &mut seed::Rng) -> Vec<f64> {
    loop {
        let mut k: Vec<f64> = (0..side * side)
            .map(|_| if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 })
            .collect();
        k[side * side / 2] += 1.0;
        let sum: f64 = k.iter().sum();
        if sum.abs() > 0.1 {
            k.iter_mut().for_each(|v| *v /= sum);
            return k;
        }
    }
}

/// Depthwise convolution with edge replication, clipped to `[0,1]`.
pub(crate) fn convolve(img: &mut Array4<f32>, i: usize, kernel: &[f64], side: usize) {
    let (_, c, h, w) = img.dim();
    let half = (side / 2) as i64;
    let src = img.slice(s![i, .., .., ..]).mapv(f64::from);
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                for kr in 0..side {
                    let sr = (r as i64 + kr as i64 - half).clamp(0, h as i64 - 1) as usize;
                    for kc in 0..side {
                        let sc = (col as i64 + kc as i64 - half).clamp(0, w as i64 - 1) as usize;
                        acc += kernel[kr * side + kc] * src[[ch, sr, sc]];
                    }
                }
                img[[i, ch, r, col]] = acc.clamp(0.0, 1.0) as f32;
            }
        }
    }
}

/// Filter every image with its class kernel.
pub fn craft_cuda(clean: &ImageBatch, cfg: &GeneratorConfig) -> Result<PoisonedDataset> {
    expect_generator(cfg, Generator::Cuda)?;
    check_input(clean)?;
    let side = cfg.cuda.kernel;
    let mut rng = seed::rng(seed::derive(cfg.seed, "cuda"));
    let kernels: Vec<Vec<f64>> = (0..clean.num_classes())
        .map(|_| draw_kernel(side, cfg.cuda.noise, &mut rng))
        .collect();
    let mut px = clean.pixels().clone();
    for (i, &y) in clean.labels().iter().enumerate() {
        convolve(&mut px, i, &kernels[y], side);
    }
    let poisoned = clean.with_pixels(px)?;
    let mut prov = cfg.provenance()?;
    prov.insert("kernel_side".into(), json!(side));
    prov.insert("kernels".into(), json!(kernels));
    PoisonedDataset::new(clean.clone(), poisoned, cfg.budget, "cuda", prov)
}
