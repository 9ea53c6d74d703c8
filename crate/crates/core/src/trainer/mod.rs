//! Training loops for the supervised, self-supervised and combined
//! methods, plus linear probing and evaluation.

mod config;
mod optim;

use std::time::Instant;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adversary::{pgd_attack_input, AttackTarget, Guide};
use crate::analysis::mean_paired_cosine;
use crate::augment::{apply_policy, cutmix, cutout, gaussian_noise, iss_transform, mixup, AugmentPolicy};
use crate::data::{ImageBatch, PoisonedDataset};
use crate::error::{Error, Result};
use crate::loss::{
    argmax_rows, cross_entropy_grad, info_nce_grad, key_nce_grad, mixed_cross_entropy_grad,
    symmetrized_cosine_grad, LabelMix,
};
use crate::model::{build_bundle, build_classifier, BundleGrads, BundlePass, HeadGrads, Heads, ModelBundle, Network};
use crate::seed;

pub use config::{
    LrSchedule, Method, ModelConfig, OptimConfig, ProbeConfig, SlAugment, SslVariant, TrainConfig,
};
pub use optim::{lr_at, Sgd};

/// Training input: a clean batch, or a poisoned dataset whose poisoned
/// images are trained on.
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    Clean(&'a ImageBatch),
    Poisoned(&'a PoisonedDataset),
}

impl<'a> TrainData<'a> {
    pub fn images(&self) -> &'a ImageBatch {
        match self {
            TrainData::Clean(b) => b,
            TrainData::Poisoned(p) => p.poisoned(),
        }
    }
}

impl<'a> From<&'a ImageBatch> for TrainData<'a> {
    fn from(b: &'a ImageBatch) -> Self {
        TrainData::Clean(b)
    }
}

impl<'a> From<&'a PoisonedDataset> for TrainData<'a> {
    fn from(p: &'a PoisonedDataset) -> Self {
        TrainData::Poisoned(p)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    /// Clean test set evaluated after every epoch.
    pub test: Option<&'a ImageBatch>,
    /// Record poison/clean accuracy and similarity every epoch.
    pub curves: bool,
    /// Record parameter hashes at attack and update time for every step.
    pub trace: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub contrastive: Option<f64>,
    pub cross_entropy: Option<f64>,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub psn_acc: Option<f64>,
    pub cln_acc: Option<f64>,
    pub psn_cln_sim: Option<f64>,
}

/// Per-step loss terms. `attack_params`/`update_params` hold parameter
/// hashes when tracing is enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub contrastive: Option<f64>,
    pub cross_entropy: Option<f64>,
    pub attack_params: Option<String>,
    pub update_params: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub method: String,
    pub config: serde_json::Value,
    /// Metrics of the untrained model, recorded with curves enabled.
    pub initial: Option<EpochMetrics>,
    pub epochs: Vec<EpochMetrics>,
    pub steps: Vec<StepLog>,
    pub checkpoint: Option<String>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    fn new(method: &str, config: serde_json::Value) -> Self {
        Self {
            version: crate::ARTIFACT_VERSION.to_string(),
            method: method.to_string(),
            config,
            initial: None,
            epochs: Vec::new(),
            steps: Vec::new(),
            checkpoint: None,
            wall_clock_secs: 0.0,
        }
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub mean_loss: f64,
}

const EVAL_CHUNK: usize = 256;

/// Logits of a flattened input, evaluated in chunks.
fn logits_of(bundle: &ModelBundle, x: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((x.nrows(), bundle.spec.num_classes));
    for start in (0..x.nrows()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(x.nrows());
        let l = bundle
            .forward_input(&x.slice(s![start..end, ..]).to_owned(), Heads::LOGITS)?
            .logits
            .expect("logits requested");
        out.slice_mut(s![start..end, ..]).assign(&l);
    }
    Ok(out)
}

/// Encoder outputs of a batch, evaluated in chunks.
pub fn representations(bundle: &ModelBundle, batch: &ImageBatch) -> Result<Array2<f64>> {
    let x = batch.to_input();
    let mut out = Array2::zeros((x.nrows(), bundle.spec.rep_dim));
    for start in (0..x.nrows()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(x.nrows());
        let r = bundle.encoder.forward(&x.slice(s![start..end, ..]).to_owned())?;
        out.slice_mut(s![start..end, ..]).assign(&r);
    }
    Ok(out)
}

fn report_from_logits(logits: &Array2<f64>, labels: &[usize], k: usize) -> Result<EvalReport> {
    let n = labels.len();
    if n == 0 {
        return Ok(EvalReport {
            accuracy: 0.0,
            per_class_accuracy: vec![0.0; k],
            mean_loss: 0.0,
        });
    }
    let pred = argmax_rows(logits);
    let (mean_loss, _) = cross_entropy_grad(logits, labels)?;
    let mut hit = vec![0usize; k];
    let mut count = vec![0usize; k];
    for (&p, &y) in pred.iter().zip(labels) {
        count[y] += 1;
        if p == y {
            hit[y] += 1;
        }
    }
    let correct: usize = hit.iter().sum();
    Ok(EvalReport {
        accuracy: correct as f64 / n as f64,
        per_class_accuracy: hit
            .iter()
            .zip(&count)
            .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
            .collect(),
        mean_loss,
    })
}

/// Classifier accuracy on `test` after the optional deterministic policy.
/// Ties resolve toward the lower class index.
pub fn evaluate(bundle: &ModelBundle, test: &ImageBatch, policy: Option<&AugmentPolicy>) -> Result<EvalReport> {
    let view;
    let batch = match policy {
        Some(p) => {
            view = apply_policy(p, test, 1)?.remove(0);
            &view
        }
        None => test,
    };
    let logits = logits_of(bundle, &batch.to_input())?;
    report_from_logits(&logits, batch.labels(), bundle.spec.num_classes)
}

fn accuracy_of(bundle: &ModelBundle, batch: &ImageBatch) -> Result<f64> {
    Ok(evaluate(bundle, batch, None)?.accuracy)
}

/// Shuffled mini-batch index lists; a trailing batch smaller than two
/// samples is dropped.
fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed::derive_index(seed::derive(seed, "shuffle"), epoch as u64)));
    idx.chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    let full = n / batch_size;
    full + usize::from(n % batch_size >= 2)
}

fn params_hash(bundle: &ModelBundle) -> String {
    format!("{}{}", bundle.backbone_hash(), bundle.classifier.params.hash_hex())
}

struct StepResult {
    loss: f64,
    contrastive: Option<f64>,
    cross_entropy: Option<f64>,
    correct: usize,
    counted: usize,
    grads: BundleGrads,
    attack_params: Option<String>,
}

fn scale_head_grads(g: &mut HeadGrads, w: f64) {
    for h in [&mut g.rep, &mut g.proj, &mut g.logits, &mut g.pred].into_iter().flatten() {
        h.mapv_inplace(|v| v * w);
    }
}

fn count_correct(logits: &Array2<f64>, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count()
}

/// SSL objective on two recorded passes; returns the value and the head
/// gradients of each pass.
fn ssl_objective(
    cfg: &TrainConfig,
    bundle: &ModelBundle,
    p1: &BundlePass,
    p2: &BundlePass,
    x1: &Array2<f64>,
    x2: &Array2<f64>,
) -> Result<(f64, HeadGrads, HeadGrads)> {
    let z1 = p1.out.proj.as_ref().expect("proj requested");
    let z2 = p2.out.proj.as_ref().expect("proj requested");
    let tau = cfg.weights.temperature;
    let mut g1 = HeadGrads::default();
    let mut g2 = HeadGrads::default();
    let value = match cfg.variant {
        SslVariant::SimClr => {
            let (v, da, db) = info_nce_grad(z1, z2, tau)?;
            g1.proj = Some(da);
            g2.proj = Some(db);
            v
        }
        SslVariant::MoCo => {
            let k1 = bundle.momentum_proj(x1)?;
            let k2 = bundle.momentum_proj(x2)?;
            let (v1, d1) = key_nce_grad(z1, &k2, tau)?;
            let (v2, d2) = key_nce_grad(z2, &k1, tau)?;
            g1.proj = Some(d1 * 0.5);
            g2.proj = Some(d2 * 0.5);
            0.5 * (v1 + v2)
        }
        SslVariant::SimSiam | SslVariant::Byol => {
            let q1 = p1.out.pred.as_ref().expect("pred requested");
            let q2 = p2.out.pred.as_ref().expect("pred requested");
            let (t1, t2) = if cfg.variant == SslVariant::Byol {
                (bundle.momentum_proj(x1)?, bundle.momentum_proj(x2)?)
            } else {
                (z1.clone(), z2.clone())
            };
            let (v, d1, d2) = symmetrized_cosine_grad(q1, &t2, q2, &t1)?;
            g1.pred = Some(d1);
            g2.pred = Some(d2);
            v
        }
    };
    Ok((value, g1, g2))
}

fn supervised_step(cfg: &TrainConfig, bundle: &ModelBundle, batch: &ImageBatch, s: u64, trace: bool) -> Result<StepResult> {
    let labels = batch.labels();
    let mut view = apply_policy(&cfg.sl_aug.with_seed(seed::derive(s, "aug")), batch, 1)?.remove(0);
    let mut mix: Option<Vec<LabelMix>> = None;
    let mut x = match cfg.sl_augment {
        SlAugment::None => view.to_input(),
        SlAugment::Cutout { hole } => {
            view = cutout(&view, hole, seed::derive(s, "mix"))?;
            view.to_input()
        }
        SlAugment::Mixup { alpha } => {
            let m = mixup(&view, alpha, seed::derive(s, "mix"))?;
            mix = Some(m.label_pairs.clone());
            m.to_input()
        }
        SlAugment::CutMix { alpha } => {
            let m = cutmix(&view, alpha, seed::derive(s, "mix"))?;
            mix = Some(m.label_pairs.clone());
            m.to_input()
        }
    };
    let mut attack_params = None;
    if cfg.method == Method::SlAt {
        if trace {
            attack_params = Some(params_hash(bundle));
        }
        let d = pgd_attack_input(bundle, &x, &AttackTarget::labels(labels), &cfg.pgd, true, seed::derive(s, "pgd"))?;
        x += &d;
    }
    let pass = bundle.forward_pass(&x, Heads::LOGITS)?;
    let logits = pass.out.logits.as_ref().expect("logits requested");
    let (ce, g) = match &mix {
        Some(m) => mixed_cross_entropy_grad(logits, m)?,
        None => cross_entropy_grad(logits, labels)?,
    };
    let mut grads = bundle.zero_grads();
    bundle.backward_pass(
        &pass,
        &HeadGrads {
            logits: Some(g),
            ..Default::default()
        },
        Some(&mut grads),
    )?;
    Ok(StepResult {
        loss: ce,
        contrastive: None,
        cross_entropy: Some(ce),
        correct: count_correct(logits, labels),
        counted: labels.len(),
        grads,
        attack_params,
    })
}

fn ssl_step(cfg: &TrainConfig, bundle: &ModelBundle, batch: &ImageBatch, s: u64, trace: bool) -> Result<StepResult> {
    let labels = batch.labels();
    let mut views = apply_policy(&cfg.pretrain_aug.with_seed(seed::derive(s, "aug")), batch, 2)?;
    if cfg.method == Method::SslSlGn {
        views[0] = gaussian_noise(&views[0], cfg.noise_sigma, cfg.noise_prob, seed::derive(s, "noise"))?;
    }
    let mut x1 = views[0].to_input();
    let x2 = views[1].to_input();
    let mut attack_params = None;
    if let Some(guide) = cfg.method.attack_guide() {
        if trace {
            attack_params = Some(params_hash(bundle));
        }
        let target = match guide {
            Guide::Ce => AttackTarget::labels(labels),
            Guide::Contrastive => AttackTarget::views(&x2, cfg.weights),
            Guide::Combined => AttackTarget::both(labels, &x2, cfg.weights),
        };
        let mut pgd = cfg.pgd;
        pgd.guide = guide;
        let d = pgd_attack_input(bundle, &x1, &target, &pgd, true, seed::derive(s, "pgd"))?;
        x1 += &d;
    }
    let joint = cfg.method.trains_classifier();
    let pred = cfg.variant.needs_predictor();
    let h1 = Heads {
        proj: true,
        logits: joint,
        pred,
    };
    let h2 = Heads {
        proj: true,
        logits: false,
        pred,
    };
    let p1 = bundle.forward_pass(&x1, h1)?;
    let p2 = bundle.forward_pass(&x2, h2)?;
    let (cl, mut g1, mut g2) = ssl_objective(cfg, bundle, &p1, &p2, &x1, &x2)?;
    let mut grads = bundle.zero_grads();
    let (loss, ce, correct, counted) = if joint {
        let logits = p1.out.logits.as_ref().expect("logits requested");
        let (ce, gl) = cross_entropy_grad(logits, labels)?;
        let w = cfg.weights;
        scale_head_grads(&mut g1, w.alpha);
        scale_head_grads(&mut g2, w.alpha);
        g1.logits = Some(gl * w.beta);
        (w.alpha * cl + w.beta * ce, Some(ce), count_correct(logits, labels), labels.len())
    } else {
        (cl, None, 0, 0)
    };
    bundle.backward_pass(&p1, &g1, Some(&mut grads))?;
    bundle.backward_pass(&p2, &g2, Some(&mut grads))?;
    Ok(StepResult {
        loss,
        contrastive: Some(cl),
        cross_entropy: ce,
        correct,
        counted,
        grads,
        attack_params,
    })
}

fn apply_update(cfg: &TrainConfig, bundle: &mut ModelBundle, opt: &mut Sgd, grads: &BundleGrads, lr: f64) -> Result<()> {
    let m = cfg.method;
    let mut params = vec![&mut bundle.encoder.params];
    let mut gs = vec![&grads.encoder];
    if m.uses_ssl() {
        params.push(&mut bundle.projector.params);
        gs.push(&grads.projector);
        if let (Some(p), Some(g)) = (bundle.predictor.as_mut(), grads.predictor.as_ref()) {
            params.push(&mut p.params);
            gs.push(g);
        }
    }
    if m.trains_classifier() {
        params.push(&mut bundle.classifier.params);
        gs.push(&grads.classifier);
    }
    opt.step(&mut params, &gs, lr);
    if m.uses_ssl() && cfg.variant.needs_momentum() {
        bundle.momentum_update(cfg.momentum_rate)?;
    }
    Ok(())
}

fn curve_metrics(bundle: &ModelBundle, data: TrainData<'_>, joint: bool, m: &mut EpochMetrics) -> Result<()> {
    if let TrainData::Poisoned(p) = data {
        if joint {
            m.psn_acc = Some(accuracy_of(bundle, p.poisoned())?);
            m.cln_acc = Some(accuracy_of(bundle, p.clean())?);
        }
        let rp = representations(bundle, p.poisoned())?;
        let rc = representations(bundle, p.clean())?;
        m.psn_cln_sim = Some(mean_paired_cosine(&rp, &rc)?);
    }
    Ok(())
}

/// Build a bundle from the config and train it.
pub fn train<'a>(
    cfg: &TrainConfig,
    data: impl Into<TrainData<'a>>,
    test: Option<&ImageBatch>,
) -> Result<(ModelBundle, RunRecord)> {
    let data = data.into();
    let bundle = initial_bundle(cfg, data.images())?;
    train_bundle(
        bundle,
        cfg,
        data,
        TrainOptions {
            test,
            ..Default::default()
        },
    )
}

/// Freshly initialized bundle for `cfg` on the shape of `images`.
pub fn initial_bundle(cfg: &TrainConfig, images: &ImageBatch) -> Result<ModelBundle> {
    let variant = if cfg.method.uses_ssl() {
        cfg.variant
    } else {
        SslVariant::SimClr
    };
    build_bundle(cfg.model.spec(
        images.image_shape(),
        images.num_classes(),
        variant,
        seed::derive(cfg.seed, "model"),
    ))
}

/// Train an existing bundle in place of a fresh one.
pub fn train_bundle(
    mut bundle: ModelBundle,
    cfg: &TrainConfig,
    data: TrainData<'_>,
    opts: TrainOptions<'_>,
) -> Result<(ModelBundle, RunRecord)> {
    cfg.validate()?;
    let started = Instant::now();
    let mut images = data.images().clone();
    if images.len() < 2 {
        return Err(Error::arg("training needs at least 2 samples"));
    }
    if images.image_shape() != bundle.spec.image_shape {
        return Err(Error::arg("training images do not match the bundle input shape"));
    }
    if let Some(mode) = cfg.iss {
        images = iss_transform(&images, mode, cfg.jpeg_quality)?;
    }
    let mut record = RunRecord::new(cfg.method.name(), serde_json::to_value(cfg)?);
    let joint = cfg.method.trains_classifier();
    if opts.curves {
        let mut m = EpochMetrics::default();
        curve_metrics(&bundle, data, joint, &mut m)?;
        if let (Some(t), true) = (opts.test, joint) {
            m.test_acc = Some(accuracy_of(&bundle, t)?);
        }
        record.initial = Some(m);
    }
    let spe = steps_per_epoch(images.len(), cfg.batch_size);
    let total = spe * cfg.epochs;
    let warmup = spe * cfg.warmup_epochs;
    let mut opt = Sgd::new(cfg.optimizer);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut sums = (0.0, 0.0, 0.0);
        let (mut correct, mut counted, mut nsteps) = (0usize, 0usize, 0usize);
        let mut lr = 0.0;
        for idx in epoch_batches(images.len(), cfg.batch_size, cfg.seed, epoch) {
            let batch = images.select(&idx);
            let s = seed::derive_index(seed::derive(cfg.seed, "step"), step as u64);
            let r = if cfg.method.uses_ssl() {
                ssl_step(cfg, &bundle, &batch, s, opts.trace)?
            } else {
                supervised_step(cfg, &bundle, &batch, s, opts.trace)?
            };
            if !r.loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    reason: format!("loss is {}", r.loss),
                });
            }
            if !r.grads.is_finite() {
                return Err(Error::Divergence {
                    step,
                    reason: "non-finite gradient".into(),
                });
            }
            lr = lr_at(cfg.lr(), cfg.schedule, step, total, warmup);
            let update_params = opts.trace.then(|| params_hash(&bundle));
            apply_update(cfg, &mut bundle, &mut opt, &r.grads, lr)?;
            sums.0 += r.loss;
            sums.1 += r.contrastive.unwrap_or(0.0);
            sums.2 += r.cross_entropy.unwrap_or(0.0);
            correct += r.correct;
            counted += r.counted;
            nsteps += 1;
            record.steps.push(StepLog {
                step,
                lr,
                loss: r.loss,
                contrastive: r.contrastive,
                cross_entropy: r.cross_entropy,
                attack_params: r.attack_params,
                update_params,
            });
            step += 1;
        }
        let k = nsteps.max(1) as f64;
        let mut m = EpochMetrics {
            epoch: epoch + 1,
            lr,
            loss: sums.0 / k,
            contrastive: cfg.method.uses_ssl().then_some(sums.1 / k),
            cross_entropy: joint.then_some(sums.2 / k),
            train_acc: (counted > 0).then(|| correct as f64 / counted as f64),
            ..Default::default()
        };
        if let (Some(t), true) = (opts.test, joint) {
            m.test_acc = Some(accuracy_of(&bundle, t)?);
        }
        if opts.curves {
            curve_metrics(&bundle, data, joint, &mut m)?;
        }
        record.epochs.push(m);
    }
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((bundle, record))
}

/// Train with per-epoch poison/clean accuracy and representation
/// similarity recorded.
pub fn psn_cln_curves<F>(
    bundle_factory: F,
    poisoned: &PoisonedDataset,
    cfg: &TrainConfig,
    test: Option<&ImageBatch>,
) -> Result<(ModelBundle, RunRecord)>
where
    F: FnOnce() -> Result<ModelBundle>,
{
    train_bundle(
        bundle_factory()?,
        cfg,
        TrainData::Poisoned(poisoned),
        TrainOptions {
            test,
            curves: true,
            trace: false,
        },
    )
}

/// Fit a fresh affine classifier on the frozen encoder.
pub fn linear_probe(
    frozen: &ModelBundle,
    data: &ImageBatch,
    cfg: &ProbeConfig,
    test: Option<&ImageBatch>,
) -> Result<(Network, RunRecord)> {
    cfg.validate()?;
    let started = Instant::now();
    let mut record = RunRecord::new("linear_probe", serde_json::to_value(cfg)?);
    let k = frozen.spec.num_classes;
    let mut clf = build_classifier(frozen.spec.rep_dim, k, seed::derive(cfg.seed, "probe"));
    let test_reps = test.map(|t| representations(frozen, t)).transpose()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::arg("probe data is empty"));
    }
    let spe = n.div_ceil(cfg.batch_size);
    let total = spe * cfg.epochs;
    let mut opt = Sgd::new(cfg.optimizer);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut seed::rng(seed::derive_index(seed::derive(cfg.seed, "shuffle"), epoch as u64)));
        let (mut loss_sum, mut correct, mut lr) = (0.0, 0usize, 0.0);
        for chunk in idx.chunks(cfg.batch_size) {
            let batch = data.select(chunk);
            let s = seed::derive_index(seed::derive(cfg.seed, "step"), step as u64);
            let view = apply_policy(&cfg.aug.with_seed(s), &batch, 1)?.remove(0);
            let reps = frozen.encoder.forward(&view.to_input())?;
            let (logits, tape) = clf.forward_tape(&reps)?;
            let (ce, g) = cross_entropy_grad(&logits, batch.labels())?;
            if !ce.is_finite() {
                return Err(Error::Divergence {
                    step,
                    reason: format!("probe loss is {ce}"),
                });
            }
            let mut grads = clf.params.zeros_like();
            clf.backward(&tape, &g, Some(&mut grads));
            lr = lr_at(cfg.lr(), cfg.schedule, step, total, 0);
            opt.step(&mut [&mut clf.params], &[&grads], lr);
            loss_sum += ce * chunk.len() as f64;
            correct += count_correct(&logits, batch.labels());
            record.steps.push(StepLog {
                step,
                lr,
                loss: ce,
                contrastive: None,
                cross_entropy: Some(ce),
                attack_params: None,
                update_params: None,
            });
            step += 1;
        }
        let test_acc = match (&test_reps, test) {
            (Some(r), Some(t)) => Some(report_from_logits(&clf.forward(r)?, t.labels(), k)?.accuracy),
            _ => None,
        };
        record.epochs.push(EpochMetrics {
            epoch: epoch + 1,
            lr,
            loss: loss_sum / n as f64,
            cross_entropy: Some(loss_sum / n as f64),
            train_acc: Some(correct as f64 / n as f64),
            test_acc,
            ..Default::default()
        });
    }
    record.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((clf, record))
}

/// Copy of `bundle` whose classifier is replaced by `classifier`.
pub fn with_classifier(bundle: &ModelBundle, classifier: Network) -> ModelBundle {
    let mut b = bundle.clone();
    b.classifier = classifier;
    b
}

/// Outcome of training a method and, when it has no joint classifier,
/// probing its encoder.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub bundle: ModelBundle,
    pub record: RunRecord,
    pub probe_record: Option<RunRecord>,
    pub test: Option<EvalReport>,
}

/// Train on `data`, attach a linear-probe classifier for methods without
/// a joint head (probing on the same training images), then evaluate.
pub fn fit<'a>(
    cfg: &TrainConfig,
    probe: &ProbeConfig,
    data: impl Into<TrainData<'a>>,
    test: Option<&ImageBatch>,
) -> Result<FitOutcome> {
    let data = data.into();
    let (mut bundle, record) = train(cfg, data, test)?;
    let mut probe_record = None;
    if !cfg.method.trains_classifier() {
        let mut images = data.images().clone();
        if let Some(mode) = cfg.iss {
            images = iss_transform(&images, mode, cfg.jpeg_quality)?;
        }
        let (clf, rec) = linear_probe(&bundle, &images, probe, test)?;
        bundle.classifier = clf;
        probe_record = Some(rec);
    }
    let test = test.map(|t| evaluate(&bundle, t, None)).transpose()?;
    Ok(FitOutcome {
        bundle,
        record,
        probe_record,
        test,
    })
}
