//! Surrogate-optimized generators: AP (adversarial examples of a trained
//! classifier) and the min-min family UE, RUE and CP.

use ndarray::{Array2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::json;

use super::{check_input, expect_generator, Generator, GeneratorConfig};
use crate::adversary::{pgd_attack_input, pgd_refine, project, AttackTarget, Guide, PgdConfig};
use crate::augment::{apply_policy, AugmentPolicy};
use crate::data::{ImageBatch, PoisonedDataset};
use crate::error::{Error, Result};
use crate::loss::{argmax_rows, cross_entropy_grad, info_nce_grad};
use crate::model::{build_bundle, HeadGrads, Heads, ModelBundle};
use crate::seed;
use crate::trainer::{Sgd, SslVariant};

/// A surrogate under constant-rate SGD, drawing minibatches from
/// successive shuffles of the sample indices.
struct Surrogate {
    bundle: ModelBundle,
    opt: Sgd,
    lr: f64,
    batch: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: seed::Rng,
    steps: usize,
}

impl Surrogate {
    fn new(clean: &ImageBatch, cfg: &GeneratorConfig) -> Result<Self> {
        let s = &cfg.surrogate;
        let spec = s.model.spec(
            clean.image_shape(),
            clean.num_classes(),
            SslVariant::SimClr,
            seed::derive(cfg.seed, "surrogate"),
        );
        Ok(Self {
            bundle: build_bundle(spec)?,
            opt: Sgd::new(s.optimizer),
            lr: s.lr(),
            batch: s.batch_size.min(clean.len()).max(2),
            order: Vec::new(),
            cursor: 0,
            rng: seed::rng(seed::derive(cfg.seed, "surrogate-batches")),
            steps: 0,
        })
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor..(self.cursor + self.batch).min(n)].to_vec();
        self.cursor += self.batch;
        idx
    }

    fn check(&self, loss: f64) -> Result<()> {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(Error::Divergence {
                step: self.steps,
                reason: format!("surrogate loss is {loss}"),
            })
        }
    }

    /// One CE step on rows `x` of the current inputs.
    fn ce_step(&mut self, x: &Array2<f64>, labels: &[usize]) -> Result<()> {
        let pass = self.bundle.forward_pass(x, Heads::LOGITS)?;
        let (ce, g) = cross_entropy_grad(pass.out.logits.as_ref().expect("logits requested"), labels)?;
        self.check(ce)?;
        let mut grads = self.bundle.zero_grads();
        self.bundle.backward_pass(
            &pass,
            &HeadGrads {
                logits: Some(g),
                ..Default::default()
            },
            Some(&mut grads),
        )?;
        let b = &mut self.bundle;
        self.opt.step(
            &mut [&mut b.encoder.params, &mut b.classifier.params],
            &[&grads.encoder, &grads.classifier],
            self.lr,
        );
        self.steps += 1;
        Ok(())
    }

    /// One InfoNCE step on a pair of views.
    fn nce_step(&mut self, x1: &Array2<f64>, x2: &Array2<f64>, tau: f64) -> Result<()> {
        let p1 = self.bundle.forward_pass(x1, Heads::PROJ)?;
        let p2 = self.bundle.forward_pass(x2, Heads::PROJ)?;
        let (v, d1, d2) = info_nce_grad(
            p1.out.proj.as_ref().expect("proj requested"),
            p2.out.proj.as_ref().expect("proj requested"),
            tau,
        )?;
        self.check(v)?;
        let mut grads = self.bundle.zero_grads();
        for (p, d) in [(&p1, d1), (&p2, d2)] {
            self.bundle.backward_pass(
                p,
                &HeadGrads {
                    proj: Some(d),
                    ..Default::default()
                },
                Some(&mut grads),
            )?;
        }
        let b = &mut self.bundle;
        self.opt.step(
            &mut [&mut b.encoder.params, &mut b.projector.params],
            &[&grads.encoder, &grads.projector],
            self.lr,
        );
        self.steps += 1;
        Ok(())
    }
}

fn accuracy(bundle: &ModelBundle, x: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    let logits = bundle.forward_input(x, Heads::LOGITS)?.logits.expect("logits requested");
    let hits = argmax_rows(&logits).iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

fn rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

fn pick<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

fn finish(
    clean: &ImageBatch,
    x: &Array2<f64>,
    delta: &Array2<f64>,
    cfg: &GeneratorConfig,
    prov: std::collections::BTreeMap<String, serde_json::Value>,
) -> Result<PoisonedDataset> {
    let poisoned = clean.with_input(&(x + delta))?;
    PoisonedDataset::new(clean.clone(), poisoned, cfg.budget, cfg.generator.name(), prov)
}

/// Adversarial examples of a surrogate trained on clean data, pushed
/// toward `y+1 mod K` (or away from `y` when untargeted).
pub fn craft_ap(clean: &ImageBatch, cfg: &GeneratorConfig) -> Result<PoisonedDataset> {
    expect_generator(cfg, Generator::Ap)?;
    check_input(clean)?;
    let eps = cfg.budget.epsilon;
    let x = clean.to_input();
    let labels = clean.labels();
    let n = clean.len();
    let mut sur = Surrogate::new(clean, cfg)?;
    let steps = cfg.surrogate.epochs * n.div_ceil(sur.batch);
    for _ in 0..steps {
        let idx = sur.next_batch(n);
        sur.ce_step(&rows(&x, &idx), &pick(labels, &idx))?;
    }
    let acc = accuracy(&sur.bundle, &x, labels)?;
    if acc < cfg.ap.min_surrogate_acc {
        return Err(Error::GeneratorQuality(format!(
            "ap surrogate reached {acc:.3} clean train accuracy, below {}",
            cfg.ap.min_surrogate_acc
        )));
    }
    let k = clean.num_classes();
    let targets: Vec<usize> = if cfg.ap.targeted {
        labels.iter().map(|&y| (y + 1) % k).collect()
    } else {
        labels.to_vec()
    };
    let pgd = PgdConfig {
        epsilon: eps,
        step_size: cfg.ap.step_size.unwrap_or(eps / 4.0),
        steps: if eps > 0.0 { cfg.ap.steps } else { 0 },
        random_start: false,
        restarts: 0,
        guide: Guide::Ce,
    };
    let delta = pgd_attack_input(
        &sur.bundle,
        &x,
        &AttackTarget::labels(&targets),
        &pgd,
        !cfg.ap.targeted,
        seed::derive(cfg.seed, "ap-pgd"),
    )?;
    let mut prov = cfg.provenance()?;
    prov.insert("surrogate_clean_acc".into(), json!(acc));
    prov.insert("targeted".into(), json!(cfg.ap.targeted));
    prov.insert("pgd".into(), serde_json::to_value(pgd)?);
    finish(clean, &x, &delta, cfg, prov)
}

/// Outcome of an alternating min-min run.
struct MinMinRun {
    delta: Array2<f64>,
    rounds: usize,
    converged: bool,
    final_acc: f64,
}

fn delta_step(cfg: &GeneratorConfig) -> f64 {
    cfg.min_min.delta_step_size.unwrap_or(cfg.budget.epsilon / 10.0)
}

/// UE and RUE share the loop; `robust` switches the δ-step to the
/// inner-adversarial point.
fn min_min_ce(clean: &ImageBatch, cfg: &GeneratorConfig, robust: bool) -> Result<MinMinRun> {
    let eps = cfg.budget.epsilon;
    let mm = cfg.min_min;
    let x = clean.to_input();
    let labels = clean.labels();
    let n = clean.len();
    let mut delta = Array2::<f64>::zeros(x.raw_dim());
    let mut sur = Surrogate::new(clean, cfg)?;
    let step_cfg = PgdConfig {
        epsilon: eps,
        step_size: delta_step(cfg),
        steps: 1,
        random_start: false,
        restarts: 0,
        guide: Guide::Ce,
    };
    let inner = PgdConfig {
        epsilon: cfg.rue.radius,
        step_size: cfg.rue.step_size.unwrap_or(cfg.rue.radius / 4.0),
        steps: cfg.rue.steps,
        random_start: true,
        restarts: 0,
        guide: Guide::Ce,
    };
    let adversarial = |bundle: &ModelBundle, xp: &Array2<f64>, labels: &[usize], s: u64| -> Result<Array2<f64>> {
        if robust && inner.epsilon > 0.0 && inner.steps > 0 {
            let rho = pgd_attack_input(bundle, xp, &AttackTarget::labels(labels), &inner, true, s)?;
            Ok(xp + &rho)
        } else {
            Ok(xp.clone())
        }
    };
    for round in 0..mm.max_rounds {
        let rs = seed::derive_index(seed::derive(cfg.seed, "round"), round as u64);
        for t in 0..mm.train_steps {
            let idx = sur.next_batch(n);
            let xb = rows(&(&x + &delta), &idx);
            let lb = pick(labels, &idx);
            let xb = adversarial(&sur.bundle, &xb, &lb, seed::derive_index(seed::derive(rs, "train"), t as u64))?;
            sur.ce_step(&xb, &lb)?;
        }
        // Checked once δ has been stepped at least once, so a surrogate
        // that simply learns the clean data cannot end the loop.
        let final_acc = accuracy(&sur.bundle, &(&x + &delta), labels)?;
        if round > 0 && final_acc >= mm.stop_acc {
            return Ok(MinMinRun {
                delta,
                rounds: round,
                converged: true,
                final_acc,
            });
        }
        if eps > 0.0 {
            for k in 0..mm.delta_steps {
                let base = adversarial(&sur.bundle, &(&x + &delta), labels, seed::derive_index(seed::derive(rs, "delta"), k as u64))?;
                // Step δ at the (possibly shifted) point, then project it
                // back around the clean image.
                let shift = &base - &x - &delta;
                let xs = &x + &shift;
                pgd_refine(&sur.bundle, &xs, &mut delta, &AttackTarget::labels(labels), &step_cfg, false)?;
                project(&mut delta, &x, eps);
            }
        }
    }
    let final_acc = accuracy(&sur.bundle, &(&x + &delta), labels)?;
    Ok(MinMinRun {
        delta,
        rounds: mm.max_rounds,
        converged: final_acc >= mm.stop_acc,
        final_acc,
    })
}

fn min_min_provenance(cfg: &GeneratorConfig, run: &MinMinRun, metric: &str) -> Result<std::collections::BTreeMap<String, serde_json::Value>> {
    let mut prov = cfg.provenance()?;
    prov.insert("rounds".into(), json!(run.rounds));
    prov.insert(
        "status".into(),
        json!(if run.converged { "converged" } else { "max_rounds_reached" }),
    );
    prov.insert(metric.into(), json!(run.final_acc));
    prov.insert("delta_step_size".into(), json!(delta_step(cfg)));
    Ok(prov)
}

/// Sample-wise error-minimizing noise.
pub fn craft_ue(clean: &ImageBatch, cfg: &GeneratorConfig) -> Result<PoisonedDataset> {
    expect_generator(cfg, Generator::Ue)?;
    check_input(clean)?;
    let run = min_min_ce(clean, cfg, false)?;
    let prov = min_min_provenance(cfg, &run, "surrogate_poison_acc")?;
    finish(clean, &clean.to_input(), &run.delta, cfg, prov)
}

/// Error-minimizing noise that stays effective against an inner
/// adversary of radius `rue.radius`.
pub fn craft_rue(clean: &ImageBatch, cfg: &GeneratorConfig) -> Result<PoisonedDataset> {
    expect_generator(cfg, Generator::Rue)?;
    check_input(clean)?;
    let run = min_min_ce(clean, cfg, true)?;
    let mut prov = min_min_provenance(cfg, &run, "surrogate_poison_acc")?;
    prov.insert("inner_radius".into(), json!(cfg.rue.radius));
    finish(clean, &clean.to_input(), &run.delta, cfg, prov)
}

/// Differentiable view used for the contrastive δ-step: horizontal flip,
/// integer shift with edge replication, and a brightness gain. Linear in
/// the input, so its adjoint is a scatter-add.
#[derive(Debug, Clone, Copy)]
struct LinearView {
    flip: bool,
    dy: i64,
    dx: i64,
    gain: f64,
}

impl LinearView {
    fn draw(rng: &mut seed::Rng, max_shift: i64) -> Self {
        Self {
            flip: rng.random::<bool>(),
            dy: rng.random_range(-max_shift..=max_shift),
            dx: rng.random_range(-max_shift..=max_shift),
            gain: rng.random_range(0.8..=1.2),
        }
    }

    fn source(&self, r: usize, c: usize, h: usize, w: usize) -> (usize, usize) {
        let sr = (r as i64 + self.dy).clamp(0, h as i64 - 1) as usize;
        let c0 = if self.flip { w - 1 - c } else { c } as i64;
        let sc = (c0 + self.dx).clamp(0, w as i64 - 1) as usize;
        (sr, sc)
    }
}

fn apply_views(x: &Array2<f64>, views: &[LinearView], shape: [usize; 3]) -> Array2<f64> {
    let [c, h, w] = shape;
    let mut out = Array2::zeros(x.raw_dim());
    for (i, v) in views.iter().enumerate() {
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let (sr, sc) = v.source(r, col, h, w);
                    out[[i, (ch * h + r) * w + col]] = v.gain * x[[i, (ch * h + sr) * w + sc]];
                }
            }
        }
    }
    out
}

fn views_adjoint(g: &Array2<f64>, views: &[LinearView], shape: [usize; 3]) -> Array2<f64> {
    let [c, h, w] = shape;
    let mut out = Array2::zeros(g.raw_dim());
    for (i, v) in views.iter().enumerate() {
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let (sr, sc) = v.source(r, col, h, w);
                    out[[i, (ch * h + sr) * w + sc]] += v.gain * g[[i, (ch * h + r) * w + col]];
                }
            }
        }
    }
    out
}

/// Share of anchors whose nearest projection in the sibling view is their
/// own, measured within chunks of the surrogate batch size.
fn contrastive_accuracy(bundle: &ModelBundle, batch: &ImageBatch, policy: &AugmentPolicy, chunk: usize) -> Result<f64> {
    let views = apply_policy(policy, batch, 2)?;
    let n = batch.len();
    let mut hits = 0usize;
    let idx: Vec<usize> = (0..n).collect();
    for part in idx.chunks(chunk) {
        let a = bundle.forward_input(&rows(&views[0].to_input(), part), Heads::PROJ)?.proj.expect("proj");
        let b = bundle.forward_input(&rows(&views[1].to_input(), part), Heads::PROJ)?.proj.expect("proj");
        let unit = |m: Array2<f64>| {
            let mut m = m;
            for mut r in m.rows_mut() {
                let nrm = r.dot(&r).sqrt().max(crate::loss::NORM_EPS);
                r /= nrm;
            }
            m
        };
        let sim = unit(a).dot(&unit(b).t());
        hits += argmax_rows(&sim).iter().enumerate().filter(|(i, j)| i == *j).count();
    }
    Ok(hits as f64 / n.max(1) as f64)
}

/// Sample-wise contrastive poisons: min-min against an InfoNCE surrogate,
/// with `δ` shared by both views and applied before augmentation.
pub fn craft_cp(clean: &ImageBatch, cfg: &GeneratorConfig) -> Result<PoisonedDataset> {
    expect_generator(cfg, Generator::Cp)?;
    check_input(clean)?;
    if clean.len() < 2 {
        return Err(Error::arg("contrastive poisons need at least 2 samples"));
    }
    let eps = cfg.budget.epsilon;
    let mm = cfg.min_min;
    let tau = cfg.surrogate.temperature;
    let shape = clean.image_shape();
    let size = shape[1].min(shape[2]);
    let x = clean.to_input();
    let n = clean.len();
    let step = delta_step(cfg);
    let mut delta = Array2::<f64>::zeros(x.raw_dim());
    let mut sur = Surrogate::new(clean, cfg)?;
    let policy = AugmentPolicy::pretrain(size, 0);
    let max_shift = (size / 8).max(1) as i64;
    let mut rounds = mm.max_rounds;
    let mut converged = false;
    let mut final_acc = 0.0;
    for round in 0..mm.max_rounds {
        let rs = seed::derive_index(seed::derive(cfg.seed, "round"), round as u64);
        let current = clean.with_input(&(&x + &delta))?;
        for t in 0..mm.train_steps {
            let idx = sur.next_batch(n);
            let s = seed::derive_index(seed::derive(rs, "train"), t as u64);
            let v = apply_policy(&policy.with_seed(s), &current.select(&idx), 2)?;
            sur.nce_step(&v[0].to_input(), &v[1].to_input(), tau)?;
        }
        if eps > 0.0 {
            let mut rng = seed::rng(seed::derive(rs, "delta"));
            for _ in 0..mm.delta_steps {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                for part in order.chunks(sur.batch) {
                    if part.len() < 2 {
                        continue;
                    }
                    let xp = rows(&(&x + &delta), part);
                    let v1: Vec<LinearView> = part.iter().map(|_| LinearView::draw(&mut rng, max_shift)).collect();
                    let v2: Vec<LinearView> = part.iter().map(|_| LinearView::draw(&mut rng, max_shift)).collect();
                    let a = apply_views(&xp, &v1, shape);
                    let b = apply_views(&xp, &v2, shape);
                    let p1 = sur.bundle.forward_pass(&a, Heads::PROJ)?;
                    let p2 = sur.bundle.forward_pass(&b, Heads::PROJ)?;
                    let (_, d1, d2) = info_nce_grad(
                        p1.out.proj.as_ref().expect("proj"),
                        p2.out.proj.as_ref().expect("proj"),
                        tau,
                    )?;
                    let g1 = sur.bundle.backward_pass(&p1, &HeadGrads { proj: Some(d1), ..Default::default() }, None)?;
                    let g2 = sur.bundle.backward_pass(&p2, &HeadGrads { proj: Some(d2), ..Default::default() }, None)?;
                    let g = views_adjoint(&g1, &v1, shape) + views_adjoint(&g2, &v2, shape);
                    for (row, &i) in part.iter().enumerate() {
                        Zip::from(delta.row_mut(i)).and(g.row(row)).for_each(|d, &gv| {
                            if gv != 0.0 {
                                *d -= step * gv.signum();
                            }
                        });
                    }
                    project(&mut delta, &x, eps);
                }
            }
        }
        let current = clean.with_input(&(&x + &delta))?;
        final_acc = contrastive_accuracy(
            &sur.bundle,
            &current,
            &policy.with_seed(seed::derive(rs, "check")),
            sur.batch,
        )?;
        if final_acc >= mm.stop_acc {
            rounds = round + 1;
            converged = true;
            break;
        }
    }
    let run = MinMinRun {
        delta,
        rounds,
        converged,
        final_acc,
    };
    let mut prov = min_min_provenance(cfg, &run, "surrogate_contrastive_acc")?;
    prov.insert("temperature".into(), json!(tau));
    finish(clean, &x, &run.delta, cfg, prov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn view_adjoint_matches_dot_product() {
        let shape = [2, 4, 5];
        let d = 40;
        let mut rng = seed::rng(9);
        let x = Array2::from_shape_fn((3, d), |_| rng.random::<f64>());
        let g = Array2::from_shape_fn((3, d), |_| rng.random::<f64>() - 0.5);
        let views: Vec<LinearView> = (0..3).map(|_| LinearView::draw(&mut rng, 2)).collect();
        let lhs = (apply_views(&x, &views, shape) * &g).sum();
        let rhs = (&x * &views_adjoint(&g, &views, shape)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
