//! L∞ projected gradient descent with a selectable guiding loss.
//!
//! Each step moves `δ` by `step_size·sign(∇δ L)` (ascending when
//! maximizing, descending otherwise), then projects onto the intersection
//! of the ε-ball and the pixel box: `δ ← clip(x+clip(δ,−ε,ε), 0, 1) − x`.

use ndarray::{Array2, Array4, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::loss::{argmax_rows, cross_entropy_grad, info_nce_grad, LossWeights};
use crate::model::{grad_wrt_input, HeadGrads, HeadLoss, Heads, ModelBundle};
use crate::seed;

/// Which objective steers the perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guide {
    /// Cross-entropy of the classifier head.
    Ce,
    /// InfoNCE against the unperturbed sibling view, batch negatives.
    Contrastive,
    /// `alpha·InfoNCE + beta·CE`.
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
    pub restarts: usize,
    pub guide: Guide,
}

impl Default for PgdConfig {
    /// 10 steps of 0.6/255 inside a 4/255 ball, random start, no restarts.
    fn default() -> Self {
        Self {
            epsilon: 4.0 / 255.0,
            step_size: 0.6 / 255.0,
            steps: 10,
            random_start: true,
            restarts: 0,
            guide: Guide::Ce,
        }
    }
}

impl PgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::arg("at.epsilon must be >= 0"));
        }
        if self.steps > 0 && !(self.step_size > 0.0) {
            return Err(Error::arg("at.step_size must be > 0 when at.steps > 0"));
        }
        Ok(())
    }
}

/// What the guiding loss is evaluated against.
#[derive(Debug, Clone, Copy)]
pub struct AttackTarget<'a> {
    /// Labels for CE guidance (targets, when minimizing toward a class).
    pub labels: Option<&'a [usize]>,
    /// Flattened positive views for contrastive guidance.
    pub positives: Option<&'a Array2<f64>>,
    pub weights: LossWeights,
}

impl<'a> AttackTarget<'a> {
    pub fn labels(labels: &'a [usize]) -> Self {
        Self {
            labels: Some(labels),
            positives: None,
            weights: LossWeights::default(),
        }
    }

    pub fn views(positives: &'a Array2<f64>, weights: LossWeights) -> Self {
        Self {
            labels: None,
            positives: Some(positives),
            weights,
        }
    }

    pub fn both(labels: &'a [usize], positives: &'a Array2<f64>, weights: LossWeights) -> Self {
        Self {
            labels: Some(labels),
            positives: Some(positives),
            weights,
        }
    }
}

/// Guiding-loss evaluator with the positive projections precomputed.
struct GuideLoss<'a> {
    guide: Guide,
    labels: Option<&'a [usize]>,
    pos_proj: Option<Array2<f64>>,
    weights: LossWeights,
}

impl<'a> GuideLoss<'a> {
    fn new(bundle: &ModelBundle, guide: Guide, target: &AttackTarget<'a>) -> Result<Self> {
        let need_labels = matches!(guide, Guide::Ce | Guide::Combined);
        let need_views = matches!(guide, Guide::Contrastive | Guide::Combined);
        if need_labels && target.labels.is_none() {
            return Err(Error::arg(format!("guide {guide:?} requires labels")));
        }
        if need_views && target.positives.is_none() {
            return Err(Error::arg(format!("guide {guide:?} requires positive views")));
        }
        let pos_proj = if need_views {
            let out = bundle.forward_input(target.positives.expect("checked"), Heads::PROJ)?;
            out.proj
        } else {
            None
        };
        Ok(Self {
            guide,
            labels: target.labels,
            pos_proj,
            weights: target.weights,
        })
    }

    fn heads(&self) -> Heads {
        match self.guide {
            Guide::Ce => Heads::LOGITS,
            Guide::Contrastive => Heads::PROJ,
            Guide::Combined => Heads::ALL,
        }
    }

    fn value_and_grad(&self, bundle: &ModelBundle, x: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        grad_wrt_input(bundle, x, self.heads(), |out| {
            let mut grads = HeadGrads::default();
            let mut value = 0.0;
            let (ce_w, cl_w) = match self.guide {
                Guide::Ce => (1.0, 0.0),
                Guide::Contrastive => (0.0, 1.0),
                Guide::Combined => (self.weights.beta, self.weights.alpha),
            };
            if self.guide != Guide::Contrastive {
                let (l, g) = cross_entropy_grad(
                    out.logits.as_ref().expect("logits requested"),
                    self.labels.expect("checked"),
                )?;
                value += ce_w * l;
                grads.logits = Some(g * ce_w);
            }
            if self.guide != Guide::Ce {
                let (l, ga, _) = info_nce_grad(
                    out.proj.as_ref().expect("proj requested"),
                    self.pos_proj.as_ref().expect("checked"),
                    self.weights.temperature,
                )?;
                value += cl_w * l;
                grads.proj = Some(ga * cl_w);
            }
            Ok(HeadLoss {
                value,
                grads: Some(grads),
            })
        })
    }

    fn value(&self, bundle: &ModelBundle, x: &Array2<f64>) -> Result<f64> {
        Ok(self.value_and_grad(bundle, x)?.0)
    }
}

pub(crate) fn project(delta: &mut Array2<f64>, x: &Array2<f64>, eps: f64) {
    Zip::from(delta).and(x).for_each(|d, &xv| {
        let v = d.clamp(-eps, eps);
        *d = (xv + v).clamp(0.0, 1.0) - xv;
    });
}

/// PGD on a flattened `N × C·H·W` input. Returns `δ` with
/// `‖δ‖∞ ≤ ε` and `x+δ ∈ [0,1]`. Parameters are read only.
pub fn pgd_attack_input(
    bundle: &ModelBundle,
    x: &Array2<f64>,
    target: &AttackTarget<'_>,
    cfg: &PgdConfig,
    maximize: bool,
    seed: u64,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    let loss = GuideLoss::new(bundle, cfg.guide, target)?;
    let mut best: Option<(f64, Array2<f64>)> = None;
    let sign = if maximize { 1.0 } else { -1.0 };
    for restart in 0..=cfg.restarts {
        let mut rng = seed::rng(seed::derive_index(seed, restart as u64));
        let mut delta = if cfg.random_start && cfg.epsilon > 0.0 {
            Array2::from_shape_fn(x.raw_dim(), |_| rng.random_range(-cfg.epsilon..=cfg.epsilon))
        } else {
            Array2::zeros(x.raw_dim())
        };
        project(&mut delta, x, cfg.epsilon);
        run_steps(&loss, bundle, x, &mut delta, cfg, sign)?;
        if cfg.restarts == 0 {
            return Ok(delta);
        }
        let v = sign * loss.value(bundle, &(x + &delta))?;
        if best.as_ref().is_none_or(|(bv, _)| v > *bv) {
            best = Some((v, delta));
        }
    }
    Ok(best.expect("at least one run").1)
}

fn run_steps(
    loss: &GuideLoss<'_>,
    bundle: &ModelBundle,
    x: &Array2<f64>,
    delta: &mut Array2<f64>,
    cfg: &PgdConfig,
    sign: f64,
) -> Result<()> {
    for _ in 0..cfg.steps {
        let (_, g) = loss.value_and_grad(bundle, &(x + &*delta))?;
        Zip::from(&mut *delta).and(&g).for_each(|d, &gv| {
            let s = if gv > 0.0 {
                1.0
            } else if gv < 0.0 {
                -1.0
            } else {
                0.0
            };
            *d += sign * cfg.step_size * s;
        });
        project(delta, x, cfg.epsilon);
    }
    Ok(())
}

/// Continue PGD from an existing `δ` (no random start, no restarts).
pub fn pgd_refine(
    bundle: &ModelBundle,
    x: &Array2<f64>,
    delta: &mut Array2<f64>,
    target: &AttackTarget<'_>,
    cfg: &PgdConfig,
    maximize: bool,
) -> Result<()> {
    cfg.validate()?;
    if delta.raw_dim() != x.raw_dim() {
        return Err(Error::arg("delta and input differ in shape"));
    }
    let loss = GuideLoss::new(bundle, cfg.guide, target)?;
    project(delta, x, cfg.epsilon);
    run_steps(&loss, bundle, x, delta, cfg, if maximize { 1.0 } else { -1.0 })
}

/// PGD on an image batch; `δ` shaped `N×C×H×W`.
pub fn pgd_attack(
    bundle: &ModelBundle,
    batch: &ImageBatch,
    target: &AttackTarget<'_>,
    cfg: &PgdConfig,
    maximize: bool,
    seed: u64,
) -> Result<Array4<f64>> {
    let [n, c, h, w] = batch.dims();
    let delta = pgd_attack_input(bundle, &batch.to_input(), target, cfg, maximize, seed)?;
    Ok(delta
        .into_shape_with_order((n, c, h, w))
        .expect("flattened batch shape"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackStats {
    /// Mean of `CE(x+δ) − CE(x)` over the batch.
    pub mean_loss_increase: f64,
    /// Fraction of samples whose predicted class changed.
    pub flip_rate: f64,
}

pub fn attack_success_stats(
    bundle: &ModelBundle,
    clean: &Array2<f64>,
    labels: &[usize],
    delta: &Array2<f64>,
) -> Result<AttackStats> {
    if clean.raw_dim() != delta.raw_dim() {
        return Err(Error::arg("clean batch and delta differ in shape"));
    }
    let n = clean.nrows();
    if n == 0 {
        return Ok(AttackStats {
            mean_loss_increase: 0.0,
            flip_rate: 0.0,
        });
    }
    let lc = bundle.forward_input(clean, Heads::LOGITS)?.logits.expect("logits");
    let la = bundle
        .forward_input(&(clean + delta), Heads::LOGITS)?
        .logits
        .expect("logits");
    let (ce_c, _) = cross_entropy_grad(&lc, labels)?;
    let (ce_a, _) = cross_entropy_grad(&la, labels)?;
    let flips = argmax_rows(&lc)
        .into_iter()
        .zip(argmax_rows(&la))
        .filter(|(a, b)| a != b)
        .count();
    Ok(AttackStats {
        mean_loss_increase: ce_a - ce_c,
        flip_rate: flips as f64 / n as f64,
    })
}
