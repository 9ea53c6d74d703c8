//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use poisonforge::data::{make_toy_split, ImageBatch, ToyRecipe};
use poisonforge::model::{build_bundle, Arch, BundleSpec, ModelBundle, NetworkBuilder};

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// InfoNCE by explicit enumeration: every one of the 2N projections is an
/// anchor, its partner in the other view the positive, everything else
/// except itself a negative.
pub fn brute_info_nce(a: &Array2<f64>, b: &Array2<f64>, tau: f64) -> f64 {
    let n = a.nrows();
    let all: Vec<Vec<f64>> = rows(a).iter().chain(rows(b).iter()).map(|r| unit(r)).collect();
    let mut total = 0.0;
    for i in 0..2 * n {
        let pos = if i < n { i + n } else { i - n };
        let mut denom = 0.0;
        for (k, z) in all.iter().enumerate() {
            if k != i {
                denom += (dot(&all[i], z) / tau).exp();
            }
        }
        let num = (dot(&all[i], &all[pos]) / tau).exp();
        total += -(num / denom).ln();
    }
    total / (2 * n) as f64
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, h: f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = xp[[r, c]];
        xp[[r, c]] = orig + h;
        let up = f(&xp);
        xp[[r, c]] = orig - h;
        let down = f(&xp);
        xp[[r, c]] = orig;
        g[[r, c]] = (up - down) / (2.0 * h);
    }
    g
}

/// Largest entrywise relative disagreement, with a small absolute floor
/// so that entries that are both near zero do not dominate.
pub fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / (x.abs().max(y.abs()) + 1e-6))
        .fold(0.0, f64::max)
}

/// Exhaustive cosine KNN: rank every training row by similarity (lower
/// index first on ties), vote among the top k, settle vote ties by the
/// earliest-ranked class.
pub fn brute_knn(train: &Array2<f64>, labels: &[usize], queries: &Array2<f64>, k: usize) -> Vec<usize> {
    let tr = rows(train);
    rows(queries)
        .iter()
        .map(|q| {
            let mut order: Vec<usize> = (0..tr.len()).collect();
            order.sort_by(|&i, &j| cos(q, &tr[j]).total_cmp(&cos(q, &tr[i])).then(i.cmp(&j)));
            let top = &order[..k];
            let count = |y: usize| top.iter().filter(|&&i| labels[i] == y).count();
            let best = top.iter().map(|&i| count(labels[i])).max().unwrap();
            labels[*top.iter().find(|&&i| count(labels[i]) == best).unwrap()]
        })
        .collect()
}

/// Max over the 2^D corners of the L∞ ball of `‖f(x')−f(x)‖₁ / radius`.
pub fn corner_max(f: impl Fn(&Array2<f64>) -> Array2<f64>, x: &[f64], radius: f64) -> f64 {
    let d = x.len();
    let base = f(&Array2::from_shape_vec((1, d), x.to_vec()).unwrap());
    (0..1u32 << d)
        .map(|mask| {
            let xp: Vec<f64> = (0..d)
                .map(|j| x[j] + if mask >> j & 1 == 1 { radius } else { -radius })
                .collect();
            let out = f(&Array2::from_shape_vec((1, d), xp).unwrap());
            out.iter().zip(base.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / radius
        })
        .fold(0.0, f64::max)
}

pub fn mlp_bundle(shape: [usize; 3], k: usize, seed: u64) -> ModelBundle {
    let mut s = BundleSpec::new(Arch::Mlp, shape, 8, 8, k);
    s.hidden = 16;
    s.seed = seed;
    build_bundle(s).unwrap()
}

/// Bundle whose encoder is the identity on the flattened input.
pub fn identity_bundle(shape: [usize; 3], k: usize, seed: u64) -> ModelBundle {
    let dim = shape.iter().product();
    let mut s = BundleSpec::new(Arch::Mlp, shape, dim, 8, k);
    s.hidden = 8;
    s.seed = seed;
    let mut b = build_bundle(s).unwrap();
    b.encoder = NetworkBuilder::new("encoder", dim, seed).build();
    b
}

/// Bundle whose logits are affine in the input.
pub fn affine_bundle(shape: [usize; 3], k: usize, seed: u64) -> ModelBundle {
    let dim = shape.iter().product();
    let mut b = mlp_bundle(shape, k, seed);
    b.encoder = NetworkBuilder::new("encoder", dim, seed).dense(8).build();
    b
}

/// 4-class toy split at 16 px with the default recipe.
pub fn toy_split(per_class: usize, test_per_class: usize, seed: u64) -> (ImageBatch, ImageBatch) {
    make_toy_split(&ToyRecipe::default(), 4, per_class, test_per_class, 16, seed).unwrap()
}

/// Generator config with the surrogate schedule shortened for contract
/// tests on small batches.
pub fn quick_generator(g: poisonforge::poisoncraft::Generator, seed: u64) -> poisonforge::poisoncraft::GeneratorConfig {
    let mut c = poisonforge::poisoncraft::GeneratorConfig::new(g).with_seed(seed);
    c.surrogate.epochs = 40;
    c.surrogate.base_lr = 1.6;
    c.surrogate.batch_size = 8;
    c.min_min.max_rounds = 3;
    c.min_min.train_steps = 10;
    c.min_min.delta_steps = 5;
    c.ap.steps = 10;
    c
}
