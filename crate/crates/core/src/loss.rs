//! Cross-entropy, InfoNCE, cosine and combined SSL+SL objectives.
//!
//! Each loss has a value-only form and a `_grad` form returning the
//! gradient with respect to its inputs. Value-only contrastive/cosine forms
//! reject zero-norm rows; the gradient forms, used during training, guard
//! the normalization with [`NORM_EPS`] instead.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-12;

/// Weights of the combined objective `alpha·L_CL + beta·L_CE`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            temperature: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::arg("loss weights must be >= 0"));
        }
        if self.alpha + self.beta <= 0.0 {
            return Err(Error::arg("alpha + beta must be > 0"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::arg("temperature must be > 0"));
        }
        Ok(())
    }
}

fn log_softmax_row(row: ndarray::ArrayView1<'_, f64>) -> Array1<f64> {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

fn check_labels(logits: &Array2<f64>, labels: &[usize]) -> Result<()> {
    let k = logits.ncols();
    if k < 2 {
        return Err(Error::arg(format!("cross-entropy needs K >= 2, got {k}")));
    }
    if labels.len() != logits.nrows() {
        return Err(Error::arg(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.nrows()
        )));
    }
    if let Some(y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::arg(format!("label {y} out of range for {k} classes")));
    }
    Ok(())
}

/// Row-wise argmax; ties resolve toward the lower index.
pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

/// Mean of `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_grad(logits, labels)?.0)
}

pub fn cross_entropy_grad(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    check_labels(logits, labels)?;
    let n = logits.nrows();
    if n == 0 {
        return Ok((0.0, Array2::zeros(logits.raw_dim())));
    }
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let ls = log_softmax_row(logits.row(i));
        total -= ls[y];
        let mut g = grad.row_mut(i);
        g.assign(&ls.mapv(f64::exp));
        g[y] -= 1.0;
    }
    grad /= n as f64;
    Ok((total / n as f64, grad))
}

/// One sample of a mixed batch: `lambda·CE(y_a) + (1−lambda)·CE(y_b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelMix {
    pub y_a: usize,
    pub y_b: usize,
    pub lambda: f64,
}

pub fn mixed_cross_entropy_grad(logits: &Array2<f64>, mix: &[LabelMix]) -> Result<(f64, Array2<f64>)> {
    let ya: Vec<usize> = mix.iter().map(|m| m.y_a).collect();
    let yb: Vec<usize> = mix.iter().map(|m| m.y_b).collect();
    check_labels(logits, &ya)?;
    check_labels(logits, &yb)?;
    let n = logits.nrows();
    if n == 0 {
        return Ok((0.0, Array2::zeros(logits.raw_dim())));
    }
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, m) in mix.iter().enumerate() {
        let ls = log_softmax_row(logits.row(i));
        total -= m.lambda * ls[m.y_a] + (1.0 - m.lambda) * ls[m.y_b];
        let mut g = grad.row_mut(i);
        g.assign(&ls.mapv(f64::exp));
        g[m.y_a] -= m.lambda;
        g[m.y_b] -= 1.0 - m.lambda;
    }
    grad /= n as f64;
    Ok((total / n as f64, grad))
}

fn row_norms(x: &Array2<f64>) -> Array1<f64> {
    x.map_axis(Axis(1), |r| r.dot(&r).sqrt())
}

fn strict_norms(x: &Array2<f64>, what: &str) -> Result<()> {
    if let Some(i) = row_norms(x).iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::Numeric(format!("{what} row {i} has zero or non-finite norm")));
    }
    Ok(())
}

/// Row-normalize with `x / (‖x‖ + eps)`, returning the norms.
fn normalize(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = row_norms(x);
    let mut u = x.clone();
    for (mut r, n) in u.rows_mut().into_iter().zip(norms.iter()) {
        r /= n + NORM_EPS;
    }
    (u, norms)
}

/// Back-propagate through [`normalize`].
fn normalize_backward(x: &Array2<f64>, norms: &Array1<f64>, du: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(x.raw_dim());
    for i in 0..x.nrows() {
        let n = norms[i];
        let d = n + NORM_EPS;
        let row = du.row(i);
        let mut out = dx.row_mut(i);
        out.assign(&(&row / d));
        if n > 0.0 {
            let xr = x.row(i);
            let coeff = xr.dot(&row) / (n * d * d);
            out.scaled_add(-coeff, &xr);
        }
    }
    dx
}

fn check_pair(a: &Array2<f64>, b: &Array2<f64>, min_rows: usize) -> Result<()> {
    if a.raw_dim() != b.raw_dim() {
        return Err(Error::arg(format!(
            "paired inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.nrows() < min_rows {
        return Err(Error::arg(format!(
            "need at least {min_rows} rows, got {}",
            a.nrows()
        )));
    }
    Ok(())
}

/// Symmetrized InfoNCE with both-view negatives.
///
/// Each of the `2N` projections is an anchor; its positive is the
/// same-index row of the other view and the remaining `2N−2` projections
/// are negatives. The result is the mean over anchors, which equals
/// `½[L(a→b) + L(b→a)]`.
pub fn info_nce(a: &Array2<f64>, b: &Array2<f64>, temperature: f64) -> Result<f64> {
    check_pair(a, b, 2)?;
    strict_norms(a, "proj_a")?;
    strict_norms(b, "proj_b")?;
    Ok(info_nce_grad(a, b, temperature)?.0)
}

pub fn info_nce_grad(
    a: &Array2<f64>,
    b: &Array2<f64>,
    temperature: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_pair(a, b, 2)?;
    if !(temperature > 0.0) {
        return Err(Error::arg("temperature must be > 0"));
    }
    let n = a.nrows();
    let (ua, na) = normalize(a);
    let (ub, nb) = normalize(b);
    let z = ndarray::concatenate(Axis(0), &[ua.view(), ub.view()]).expect("same width");
    let m = 2 * n;
    let s = z.dot(&z.t()) / temperature;
    let mut ds = Array2::<f64>::zeros((m, m));
    let mut total = 0.0;
    for i in 0..m {
        let pos = (i + n) % m;
        let row = s.row(i);
        let mx = row
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != i)
            .fold(f64::NEG_INFINITY, |acc, (_, &v)| acc.max(v));
        let denom: f64 = row
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != i)
            .map(|(_, &v)| (v - mx).exp())
            .sum();
        let lse = mx + denom.ln();
        total += lse - row[pos];
        for k in 0..m {
            if k != i {
                ds[[i, k]] = (row[k] - lse).exp();
            }
        }
        ds[[i, pos]] -= 1.0;
    }
    ds /= m as f64;
    let dz = (&ds + &ds.t()).dot(&z) / temperature;
    let da = normalize_backward(a, &na, &dz.slice(ndarray::s![..n, ..]).to_owned());
    let db = normalize_backward(b, &nb, &dz.slice(ndarray::s![n.., ..]).to_owned());
    Ok((total / m as f64, da, db))
}

/// Queue-free MoCo objective: each query's positive is its own key; the
/// other keys in the batch are negatives. Keys receive no gradient.
pub fn key_nce_grad(
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    temperature: f64,
) -> Result<(f64, Array2<f64>)> {
    check_pair(queries, keys, 2)?;
    let n = queries.nrows();
    let (uq, nq) = normalize(queries);
    let (uk, _) = normalize(keys);
    let s = uq.dot(&uk.t()) / temperature;
    let mut ds = Array2::<f64>::zeros((n, n));
    let mut total = 0.0;
    for i in 0..n {
        let ls = log_softmax_row(s.row(i));
        total -= ls[i];
        let mut g = ds.row_mut(i);
        g.assign(&ls.mapv(f64::exp));
        g[i] -= 1.0;
    }
    ds /= n as f64;
    let duq = ds.dot(&uk) / temperature;
    Ok((total / n as f64, normalize_backward(queries, &nq, &duq)))
}

/// Mean of `−cos(pred_i, target_i)`.
pub fn cosine_loss(pred: &Array2<f64>, target: &Array2<f64>) -> Result<f64> {
    check_pair(pred, target, 1)?;
    strict_norms(pred, "pred")?;
    strict_norms(target, "target")?;
    Ok(cosine_loss_grad(pred, target)?.0)
}

/// Gradient flows to `pred` only; `target` is treated as a constant.
pub fn cosine_loss_grad(pred: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    check_pair(pred, target, 1)?;
    let n = pred.nrows() as f64;
    let (up, np) = normalize(pred);
    let (ut, _) = normalize(target);
    let value = -(&up * &ut).sum() / n;
    let du = -&ut / n;
    Ok((value, normalize_backward(pred, &np, &du)))
}

/// `½[D(p1, sg(z2)) + D(p2, sg(z1))]` with `D` the negative cosine.
pub fn symmetrized_cosine_grad(
    p1: &Array2<f64>,
    z2: &Array2<f64>,
    p2: &Array2<f64>,
    z1: &Array2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let (l1, g1) = cosine_loss_grad(p1, z2)?;
    let (l2, g2) = cosine_loss_grad(p2, z1)?;
    Ok((0.5 * (l1 + l2), g1 * 0.5, g2 * 0.5))
}

/// Combined objective with its raw terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VesprLoss {
    pub total: f64,
    pub contrastive: f64,
    pub cross_entropy: f64,
}

#[derive(Debug, Clone)]
pub struct VesprLossGrad {
    pub loss: VesprLoss,
    pub proj_adv: Array2<f64>,
    pub proj_pos: Array2<f64>,
    pub logits_adv: Array2<f64>,
}

fn combine(weights: &LossWeights, contrastive: f64, cross_entropy: f64) -> VesprLoss {
    VesprLoss {
        total: weights.alpha * contrastive + weights.beta * cross_entropy,
        contrastive,
        cross_entropy,
    }
}

/// `alpha·InfoNCE(proj_adv, proj_pos) + beta·CE(logits_adv, labels)`;
/// negatives are the other samples' projections in both views.
pub fn vespr_loss(
    proj_adv: &Array2<f64>,
    proj_pos: &Array2<f64>,
    logits_adv: &Array2<f64>,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<VesprLoss> {
    weights.validate()?;
    let cl = info_nce(proj_adv, proj_pos, weights.temperature)?;
    let ce = cross_entropy(logits_adv, labels)?;
    Ok(combine(weights, cl, ce))
}

pub fn vespr_loss_grad(
    proj_adv: &Array2<f64>,
    proj_pos: &Array2<f64>,
    logits_adv: &Array2<f64>,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<VesprLossGrad> {
    weights.validate()?;
    if proj_adv.nrows() != logits_adv.nrows() {
        return Err(Error::arg("projection and logit rows differ"));
    }
    let (cl, ga, gp) = info_nce_grad(proj_adv, proj_pos, weights.temperature)?;
    let (ce, gl) = cross_entropy_grad(logits_adv, labels)?;
    Ok(VesprLossGrad {
        loss: combine(weights, cl, ce),
        proj_adv: ga * weights.alpha,
        proj_pos: gp * weights.alpha,
        logits_adv: gl * weights.beta,
    })
}
