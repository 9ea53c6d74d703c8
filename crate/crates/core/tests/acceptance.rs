//! Acceptance criteria 1-8.
//!
//! Runs without the libtest harness so every criterion prints exactly one
//! `criterion N: PASS|FAIL ...` line. Positional arguments select
//! criteria by number (`cargo test --test acceptance -- 1 4`). A final
//! summary line counts passes. With `--strict` the process also exits
//! nonzero when any selected criterion fails; without it a failing
//! criterion is reported but does not abort the rest of `cargo test`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{
    affine_bundle, brute_info_nce, brute_knn, corner_max, identity_bundle, max_rel_err, mlp_bundle, numeric_grad,
    quick_generator,
};
use ndarray::{Array2, Array3};
use poisonforge::adversary::{pgd_attack_input, AttackTarget, Guide, PgdConfig};
use poisonforge::analysis::{effective_rank, knn_eval, local_lipschitz, RepresentationMatrix};
use poisonforge::bench::{run_bench, BenchOptions, BenchReport};
use poisonforge::config::{ConfigSource, RunConfig};
use poisonforge::data::{make_toy_dataset, Norm, PoisonedDataset};
use poisonforge::loss::{
    cosine_loss, cosine_loss_grad, cross_entropy, cross_entropy_grad, info_nce, info_nce_grad, key_nce_grad,
    mixed_cross_entropy_grad, vespr_loss, vespr_loss_grad, LabelMix, LossWeights,
};
use poisonforge::model::{Heads, ModelBundle};
use poisonforge::poisoncraft::{craft, verify_budget, Generator};
use poisonforge::trainer::{evaluate, fit, initial_bundle, psn_cln_curves, Method, RunRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

/// Result of one criterion: verdict plus a one-line summary.
struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Checks accumulated inside a criterion; the first few failures are kept.
#[derive(Default)]
struct Checks {
    total: usize,
    failed: Vec<String>,
}

impl Checks {
    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.total += 1;
        if !ok && self.failed.len() < 5 {
            self.failed.push(what());
        } else if !ok {
            self.failed.push(String::new());
        }
    }

    fn verdict(self, summary: String) -> Verdict {
        if self.failed.is_empty() {
            Verdict::new(true, format!("{} checks; {summary}", self.total))
        } else {
            let shown: Vec<&String> = self.failed.iter().filter(|s| !s.is_empty()).collect();
            Verdict::new(
                false,
                format!("{}/{} checks failed; {summary}; first: {shown:?}", self.failed.len(), self.total),
            )
        }
    }
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

// ---------------------------------------------------------------- 1

/// Logit difference `z₁ − z₀` of a bundle on one flat input.
fn logit_gap(b: &ModelBundle, x: &[f64]) -> f64 {
    let a = Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap();
    let z = b.forward_input(&a, Heads::LOGITS).unwrap().logits.unwrap();
    z[[0, 1]] - z[[0, 0]]
}

fn criterion_1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let mut c = Checks::default();
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_oracle = 0.0f64;
    for draw in 0..200u64 {
        let k = rng.random_range(2..=4);
        let per = rng.random_range(2..=3);
        let data = make_toy_dataset(k, per, 8, draw).unwrap();
        let x = data.to_input();
        let model = if draw % 2 == 0 {
            mlp_bundle([3, 8, 8], k, draw)
        } else {
            affine_bundle([3, 8, 8], k, draw)
        };
        let eps = rng.random_range(0..=16) as f64 / 255.0;
        let cfg = PgdConfig {
            epsilon: eps,
            step_size: rng.random_range(0.25..2.0) / 255.0,
            steps: rng.random_range(0..=8),
            random_start: rng.random_bool(0.5),
            restarts: rng.random_range(0..=2),
            guide: [Guide::Ce, Guide::Contrastive, Guide::Combined][rng.random_range(0..3)],
        };
        let positives = x.mapv(|v| 0.7 * v + 0.15);
        let target = AttackTarget::both(data.labels(), &positives, LossWeights::default());
        let maximize = rng.random_bool(0.7);
        let d = pgd_attack_input(&model, &x, &target, &cfg, maximize, draw).unwrap();
        let excess = d.iter().map(|v| v.abs()).fold(0.0, f64::max) - eps;
        worst_excess = worst_excess.max(excess);
        c.check(excess <= 1e-7, || format!("draw {draw}: ‖δ‖∞ exceeds ε by {excess}"));
        c.check(x.iter().zip(d.iter()).all(|(a, b)| (0.0..=1.0).contains(&(a + b))), || {
            format!("draw {draw}: x+δ leaves [0,1]")
        });
        let again = pgd_attack_input(&model, &x, &target, &cfg, maximize, draw).unwrap();
        c.check(again == d, || format!("draw {draw}: not deterministic"));
        let zero = pgd_attack_input(&model, &x, &target, &PgdConfig { epsilon: 0.0, ..cfg }, maximize, draw).unwrap();
        c.check(zero.iter().all(|&v| v == 0.0), || format!("draw {draw}: ε=0 gives nonzero δ"));

        // Closed form on an affine binary model: the CE input gradient has
        // a constant sign pattern, so enough steps saturate at the FGSM
        // point clip(x + ε·sign g) − x.
        let dim = 12;
        let lin = affine_bundle([1, 1, dim], 2, draw);
        let origin = vec![0.0; dim];
        let g0 = logit_gap(&lin, &origin);
        let w: Vec<f64> = (0..dim)
            .map(|j| {
                let mut e = origin.clone();
                e[j] = 1.0;
                logit_gap(&lin, &e) - g0
            })
            .collect();
        let xs: Vec<f64> = (0..3 * dim)
            .map(|_| match rng.random_range(0..4) {
                0 => rng.random_range(0.0..0.02),
                1 => rng.random_range(0.98..1.0),
                _ => rng.random_range(0.0..1.0),
            })
            .collect();
        let xl = Array2::from_shape_vec((3, dim), xs).unwrap();
        for i in 0..3 {
            let row = xl.row(i).to_vec();
            let pred = g0 + row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            c.check((logit_gap(&lin, &row) - pred).abs() < 1e-9, || {
                format!("draw {draw}: affine model is not affine")
            });
        }
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..2)).collect();
        let steps = rng.random_range(1..=6);
        let lcfg = PgdConfig {
            epsilon: rng.random_range(1..=16) as f64 / 255.0,
            step_size: 0.0,
            steps,
            random_start: rng.random_bool(0.5),
            restarts: rng.random_range(0..=1),
            guide: Guide::Ce,
        };
        let lcfg = PgdConfig {
            step_size: 2.0 * lcfg.epsilon / steps as f64 + 1e-6,
            ..lcfg
        };
        let dl = pgd_attack_input(&lin, &xl, &AttackTarget::labels(&labels), &lcfg, true, draw).unwrap();
        for i in 0..3 {
            // ∂CE/∂x = (p₁ − [y=1])·w, so its sign is ±sign(w) with + for y=0
            let s = if labels[i] == 0 { 1.0 } else { -1.0 };
            for j in 0..dim {
                if w[j].abs() < 1e-9 {
                    continue;
                }
                let xv = xl[[i, j]];
                let want = (xv + lcfg.epsilon * s * w[j].signum()).clamp(0.0, 1.0) - xv;
                let err = (dl[[i, j]] - want).abs();
                worst_oracle = worst_oracle.max(err);
                c.check(err <= 1e-5, || format!("draw {draw}: FGSM oracle off by {err}"));
            }
        }
    }
    c.verdict(format!(
        "200 draws; max ‖δ‖∞−ε = {worst_excess:.2e}; max FGSM-oracle error = {worst_oracle:.2e}"
    ))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let mut c = Checks::default();
    let mut worst_nce = 0.0f64;
    for trial in 0..100 {
        let n = rng.random_range(2..=8);
        let d = rng.random_range(2..=6);
        let tau = [0.1, 0.2, 0.5, 1.0][trial % 4];
        let a = rand_matrix(&mut rng, n, d);
        let b = rand_matrix(&mut rng, n, d);
        let err = (info_nce(&a, &b, tau).unwrap() - brute_info_nce(&a, &b, tau)).abs();
        worst_nce = worst_nce.max(err);
        c.check(err <= 1e-6, || format!("InfoNCE off by {err} at N={n}"));
    }
    for k in 2..=16 {
        let v = cross_entropy(&Array2::from_elem((4, k), 0.3), &[0, 1, k - 1, 1]).unwrap();
        c.check((v - (k as f64).ln()).abs() <= 1e-9, || format!("uniform CE at K={k} is {v}"));
    }
    for _ in 0..20 {
        let pa = rand_matrix(&mut rng, 4, 3);
        let pp = rand_matrix(&mut rng, 4, 3);
        let lg = rand_matrix(&mut rng, 4, 3);
        let y = [0, 2, 1, 1];
        let w = LossWeights {
            alpha: rng.random_range(0.0..5.0),
            beta: rng.random_range(0.0..2.0),
            temperature: 0.2,
        };
        let v = vespr_loss(&pa, &pp, &lg, &y, &w).unwrap();
        let want = w.alpha * info_nce(&pa, &pp, 0.2).unwrap() + w.beta * cross_entropy(&lg, &y).unwrap();
        c.check(v.total == want, || format!("vespr_loss {} != {want}", v.total));
    }
    let (h, tol) = (1e-5, 1e-3);
    let mut worst_grad = 0.0f64;
    let mut grad_check = |c: &mut Checks, name: &str, e: f64| {
        worst_grad = worst_grad.max(e);
        c.check(e < tol, || format!("{name} gradient rel. error {e}"));
    };
    for _ in 0..10 {
        let lg = rand_matrix(&mut rng, 5, 4);
        let y = [0, 3, 1, 2, 2];
        let (_, g) = cross_entropy_grad(&lg, &y).unwrap();
        grad_check(&mut c, "CE", max_rel_err(&g, &numeric_grad(|x| cross_entropy(x, &y).unwrap(), &lg, h)));
        let mix: Vec<LabelMix> = (0..5)
            .map(|i| LabelMix {
                y_a: i % 4,
                y_b: (i + 1) % 4,
                lambda: rng.random_range(0.0..1.0),
            })
            .collect();
        let (_, g) = mixed_cross_entropy_grad(&lg, &mix).unwrap();
        let n = numeric_grad(|x| mixed_cross_entropy_grad(x, &mix).unwrap().0, &lg, h);
        grad_check(&mut c, "mixed CE", max_rel_err(&g, &n));
        let a = rand_matrix(&mut rng, 4, 3);
        let b = rand_matrix(&mut rng, 4, 3);
        let (_, da, db) = info_nce_grad(&a, &b, 0.2).unwrap();
        grad_check(&mut c, "InfoNCE/a", max_rel_err(&da, &numeric_grad(|x| info_nce(x, &b, 0.2).unwrap(), &a, h)));
        grad_check(&mut c, "InfoNCE/b", max_rel_err(&db, &numeric_grad(|x| info_nce(&a, x, 0.2).unwrap(), &b, h)));
        let (_, dq) = key_nce_grad(&a, &b, 0.5).unwrap();
        let n = numeric_grad(|x| key_nce_grad(x, &b, 0.5).unwrap().0, &a, h);
        grad_check(&mut c, "key NCE", max_rel_err(&dq, &n));
        let (_, dp) = cosine_loss_grad(&a, &b).unwrap();
        grad_check(&mut c, "cosine", max_rel_err(&dp, &numeric_grad(|x| cosine_loss(x, &b).unwrap(), &a, h)));
        let w = LossWeights {
            alpha: 0.3,
            beta: 0.7,
            temperature: 0.2,
        };
        let lg4 = rand_matrix(&mut rng, 4, 3);
        let y4 = [0, 1, 2, 0];
        let g = vespr_loss_grad(&a, &b, &lg4, &y4, &w).unwrap();
        let f = |pa: &Array2<f64>, pp: &Array2<f64>, l: &Array2<f64>| vespr_loss(pa, pp, l, &y4, &w).unwrap().total;
        grad_check(&mut c, "combined/adv", max_rel_err(&g.proj_adv, &numeric_grad(|x| f(x, &b, &lg4), &a, h)));
        grad_check(&mut c, "combined/pos", max_rel_err(&g.proj_pos, &numeric_grad(|x| f(&a, x, &lg4), &b, h)));
        grad_check(&mut c, "combined/logits", max_rel_err(&g.logits_adv, &numeric_grad(|x| f(&a, &b, x), &lg4, h)));
    }
    c.verdict(format!("max InfoNCE error {worst_nce:.1e}; max gradient rel. error {worst_grad:.1e}"))
}

// ---------------------------------------------------------------- 3

fn rep_matrix(reps: Array2<f64>, labels: Vec<usize>) -> RepresentationMatrix {
    let ids = (0..labels.len()).map(|i| format!("r{i}")).collect();
    RepresentationMatrix::new(reps, labels, ids).unwrap()
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let mut c = Checks::default();
    for trial in 0..100u64 {
        let n = rng.random_range(1..=50);
        let q = rng.random_range(1..=10);
        let d = rng.random_range(2..=5);
        let classes = rng.random_range(2..=5);
        let train = rand_matrix(&mut rng, n, d);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let queries = rand_matrix(&mut rng, q, d);
        let qlabels: Vec<usize> = (0..q).map(|_| rng.random_range(0..classes)).collect();
        let k = rng.random_range(1..=n.min(20));
        let pred = brute_knn(&train, &labels, &queries, k);
        let want = pred.iter().zip(&qlabels).filter(|(a, b)| a == b).count() as f64 / q as f64;
        let got = knn_eval(&rep_matrix(train, labels), &rep_matrix(queries, qlabels), k, n, trial).unwrap();
        c.check(got == want, || format!("knn trial {trial}: {got} vs {want}"));
    }

    let line = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - 2.0) * [1.0, -2.0, 0.5][j]);
    let e = effective_rank(&line).unwrap();
    c.check((e - 1.0).abs() <= 1e-6, || format!("rank-1 effective rank {e}"));
    for d in 1..=6 {
        let mut m = Array2::zeros((2 * d, d));
        for i in 0..d {
            m[[2 * i, i]] = 1.0;
            m[[2 * i + 1, i]] = -1.0;
        }
        let e = effective_rank(&m).unwrap();
        c.check((e - d as f64).abs() <= 1e-6, || format!("uniform spectrum d={d}: {e}"));
    }
    let two = ndarray::array![[0.9, 0.0], [-0.9, 0.0], [0.0, 0.1], [0.0, -0.1]];
    let want = (-(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln())).exp();
    let e = effective_rank(&two).unwrap();
    c.check((e - want).abs() <= 1e-6, || format!("{{0.9,0.1}} spectrum: {e} vs {want}"));

    let mut worst = f64::NEG_INFINITY;
    for seed in 0..60u64 {
        let b = if seed % 3 == 0 {
            identity_bundle([1, 2, 2], 2, seed)
        } else {
            mlp_bundle([1, 2, 2], 2, seed)
        };
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..0.95)).collect();
        let r = rng.random_range(0.002..0.1);
        let truth = corner_max(|v| b.encoder.forward(v).unwrap(), &x, r);
        let est = local_lipschitz(&b, &Array2::from_shape_vec((1, 4), x).unwrap(), r, 10, seed).unwrap();
        worst = worst.max(est - truth);
        c.check(est <= truth + 1e-6, || format!("lipschitz seed {seed}: {est} > corner max {truth}"));
    }
    c.verdict(format!("100 KNN instances; max (estimate − corner max) = {worst:.2e}"))
}

// ---------------------------------------------------------------- 4

fn delta(p: &PoisonedDataset, i: usize) -> Array3<f32> {
    &p.poisoned().image(i) - &p.clean().image(i)
}

fn criterion_4() -> Verdict {
    let side = 16;
    let clean = make_toy_dataset(4, 8, side, 0xC4).unwrap();
    let mut c = Checks::default();
    for g in Generator::ALL {
        let name = g.name();
        let p = match craft(&clean, &quick_generator(g, 4)) {
            Ok(p) => p,
            Err(e) => {
                c.check(false, || format!("{name}: {e}"));
                continue;
            }
        };
        c.check(p.poisoned().labels() == clean.labels() && p.poisoned().ids() == clean.ids(), || {
            format!("{name}: labels or ids changed")
        });
        c.check(p.poisoned().pixels().iter().all(|v| (0.0..=1.0).contains(v)), || format!("{name}: pixel range"));
        c.check(craft(&clean, &quick_generator(g, 4)).ok().as_ref() == Some(&p), || {
            format!("{name}: not deterministic")
        });
        let r = verify_budget(&p);
        if g.is_additive() {
            c.check(r.passed == Some(true), || format!("{name}: budget violations {:?}", r.violations));
        }
        let prov = p.generator_config();
        match g {
            Generator::Lsp => {
                // same δ for every member of a class wherever no clipping occurred
                let eps = p.budget().epsilon as f32;
                for members in clean.class_indices() {
                    let first = delta(&p, members[0]);
                    for &i in &members[1..] {
                        let d = delta(&p, i);
                        let ok = first.iter().zip(d.iter()).enumerate().all(|(j, (a, b))| {
                            let x0 = clean.image(members[0]).iter().nth(j).copied().unwrap();
                            let x1 = clean.image(i).iter().nth(j).copied().unwrap();
                            let free = |v: f32| v >= eps && v <= 1.0 - eps;
                            !(free(x0) && free(x1)) || (a - b).abs() < 1e-6
                        });
                        c.check(ok, || format!("lsp: sample {i} deviates from its class pattern"));
                    }
                }
            }
            Generator::Ops => {
                c.check(r.norm == Norm::L0 && r.distances.iter().all(|&d| d == 1.0), || {
                    format!("ops: L0 distances {:?}", r.distances)
                });
                let pixels: Vec<Value> = serde_json::from_value(prov["pixels"].clone()).unwrap();
                for (i, &y) in clean.labels().iter().enumerate() {
                    let (row, col) = (pixels[y]["row"].as_u64().unwrap() as usize, pixels[y]["col"].as_u64().unwrap() as usize);
                    let color: Vec<f32> = serde_json::from_value(pixels[y]["color"].clone()).unwrap();
                    let here: Vec<f32> = (0..3).map(|ch| p.poisoned().image(i)[[ch, row, col]]).collect();
                    c.check(here == color, || format!("ops: sample {i} lacks its class pixel"));
                }
            }
            Generator::Cuda => {
                let kernels: Vec<Vec<f64>> = serde_json::from_value(prov["kernels"].clone()).unwrap();
                let ks = (kernels[0].len() as f64).sqrt() as i64;
                for (i, &y) in clean.labels().iter().enumerate() {
                    let src = clean.image(i);
                    let out = p.poisoned().image(i);
                    let mut worst = 0.0f32;
                    for ch in 0..3 {
                        for r in 0..side as i64 {
                            for col in 0..side as i64 {
                                let mut acc = 0.0;
                                for kr in 0..ks {
                                    for kc in 0..ks {
                                        let sr = (r + kr - ks / 2).clamp(0, side as i64 - 1) as usize;
                                        let sc = (col + kc - ks / 2).clamp(0, side as i64 - 1) as usize;
                                        acc += kernels[y][(kr * ks + kc) as usize] * src[[ch, sr, sc]] as f64;
                                    }
                                }
                                let e = (out[[ch, r as usize, col as usize]] - acc.clamp(0.0, 1.0) as f32).abs();
                                worst = worst.max(e);
                            }
                        }
                    }
                    c.check(worst < 1e-5, || format!("cuda: sample {i} is not its class kernel's output ({worst})"));
                }
            }
            _ => {}
        }
    }
    c.verdict("7 generators".into())
}

// ---------------------------------------------------------------- 5

fn seed_source(seed: u64) -> ConfigSource {
    let mut s = ConfigSource::new();
    s.set("seed", Value::from(seed)).unwrap();
    s
}

fn criterion_5() -> Verdict {
    let mut lines = Vec::new();
    let mut wins = [0usize; 2];
    let gens = [Generator::Ap, Generator::Ue];
    for seed in 0..3u64 {
        let src = seed_source(seed);
        let base = src.resolve().unwrap();
        let (train, test) = base.data.load(base.data_seed()).unwrap();
        let sl = RunConfig::for_method(&src, Method::Sl).unwrap();
        let clean_acc = fit(&sl.train, &sl.probe, &train, Some(&test)).unwrap().test.unwrap().accuracy;
        for (gi, g) in gens.iter().enumerate() {
            let gcfg = RunConfig::for_generator(&src, *g).unwrap();
            let outcome = craft(&train, &gcfg.craft).and_then(|p| {
                let (b, rec) = psn_cln_curves(|| initial_bundle(&sl.train, p.poisoned()), &p, &sl.train, None)?;
                Ok((evaluate(&b, &test, None)?.accuracy, rec))
            });
            match outcome {
                Ok((test_acc, rec)) => {
                    let first = rec.epochs.first().unwrap();
                    let last = rec.epochs.last().unwrap();
                    let psn = last.psn_acc.unwrap();
                    let (s1, sn) = (first.psn_cln_sim.unwrap(), last.psn_cln_sim.unwrap());
                    let ok = psn >= 0.9 && test_acc < 0.5 * clean_acc && sn < s1;
                    wins[gi] += ok as usize;
                    lines.push(format!(
                        "s{seed}/{}: psn {psn:.2} test {test_acc:.2} (clean {clean_acc:.2}) sim {s1:.2}->{sn:.2} {}",
                        g.name(),
                        if ok { "ok" } else { "no" }
                    ));
                }
                Err(e) => lines.push(format!("s{seed}/{}: error {e}", g.name())),
            }
        }
    }
    let pass = wins.iter().any(|&w| w >= 2);
    Verdict::new(
        pass,
        format!("seeds passing: ap {}/3, ue {}/3; {}", wins[0], wins[1], lines.join("; ")),
    )
}

// ---------------------------------------------------------------- 6, 7

const BENCH_METHODS: [Method; 4] = [Method::Sl, Method::Ssl, Method::Vespr, Method::SslSl];

fn bench_for_seed(seed: u64) -> BenchReport {
    let mut s = seed_source(seed);
    let methods: Vec<&str> = BENCH_METHODS.iter().map(|m| m.name()).collect();
    s.set("bench.methods", serde_json::to_value(methods).unwrap()).unwrap();
    s.set("bench.analysis", Value::from(true)).unwrap();
    run_bench(&s, &BenchOptions::default()).unwrap()
}

fn criterion_6(benches: &[BenchReport]) -> Verdict {
    let mut passes = 0;
    let mut lines = Vec::new();
    for (seed, b) in benches.iter().enumerate() {
        let t = &b.table;
        let (sl_min, sl_avg) = (t.psn_min(Method::Sl).unwrap(), t.psn_avg(Method::Sl).unwrap());
        let (v_min, v_avg) = (t.psn_min(Method::Vespr).unwrap(), t.psn_avg(Method::Vespr).unwrap());
        let ssl_avg = t.psn_avg(Method::Ssl).unwrap();
        let ok = v_min > sl_min && v_avg > sl_avg && v_avg >= ssl_avg;
        passes += ok as usize;
        lines.push(format!(
            "s{seed}: min vespr {v_min:.3} sl {sl_min:.3}; avg vespr {v_avg:.3} sl {sl_avg:.3} ssl {ssl_avg:.3} {}",
            if ok { "ok" } else { "no" }
        ));
    }
    Verdict::new(passes >= 2, format!("{passes}/3 seeds; {}", lines.join("; ")))
}

/// Mean of one analysis metric over every poisoned cell of `method`.
fn metric_mean(benches: &[BenchReport], method: Method, pick: fn(&poisonforge::analysis::AnalysisReport) -> f64) -> f64 {
    let vals: Vec<f64> = benches
        .iter()
        .flat_map(|b| b.cells.iter())
        .filter(|c| c.method == method)
        .filter_map(|c| c.analysis.as_ref().map(pick))
        .collect();
    if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

fn criterion_7(benches: &[BenchReport]) -> Verdict {
    let ics_ssl = metric_mean(benches, Method::Ssl, |a| a.in_cls_sim_psn);
    let ics_sl = metric_mean(benches, Method::Sl, |a| a.in_cls_sim_psn);
    let pcs_v = metric_mean(benches, Method::Vespr, |a| a.psn_cln_sim);
    let pcs_sl = metric_mean(benches, Method::Sl, |a| a.psn_cln_sim);
    let lip_v = metric_mean(benches, Method::Vespr, |a| a.local_lip_psn);
    let lip_ss = metric_mean(benches, Method::SslSl, |a| a.local_lip_psn);
    let checks = [ics_ssl < ics_sl, pcs_v > pcs_sl, lip_v < lip_ss];
    let per_seed: Vec<String> = benches
        .iter()
        .enumerate()
        .map(|(seed, b)| {
            let one = std::slice::from_ref(b);
            format!(
                "s{seed} ics {:.3}/{:.3} pcs {:.3}/{:.3} lip {:.0}/{:.0}",
                metric_mean(one, Method::Ssl, |a| a.in_cls_sim_psn),
                metric_mean(one, Method::Sl, |a| a.in_cls_sim_psn),
                metric_mean(one, Method::Vespr, |a| a.psn_cln_sim),
                metric_mean(one, Method::Sl, |a| a.psn_cln_sim),
                metric_mean(one, Method::Vespr, |a| a.local_lip_psn),
                metric_mean(one, Method::SslSl, |a| a.local_lip_psn),
            )
        })
        .collect();
    Verdict::new(
        checks.iter().all(|&b| b),
        format!(
            "in_class_sim ssl {ics_ssl:.3} < sl {ics_sl:.3}: {}; psn_cln_sim vespr {pcs_v:.3} > sl {pcs_sl:.3}: {}; local_lip vespr {lip_v:.2} < ssl_sl {lip_ss:.2}: {} (means over 7 poisons x 3 seeds); per seed: {}",
            checks[0],
            checks[1],
            checks[2],
            per_seed.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 8

fn record_complete(rec: &RunRecord, epochs: usize, needs_contrastive: bool) -> Result<(), String> {
    if rec.epochs.len() != epochs {
        return Err(format!("{} of {epochs} epochs recorded", rec.epochs.len()));
    }
    for e in &rec.epochs {
        let vals = [Some(e.loss), e.cross_entropy, e.train_acc, e.test_acc];
        if vals.iter().any(|v| !v.is_some_and(f64::is_finite)) {
            return Err(format!("epoch {} has missing or non-finite metrics", e.epoch));
        }
        if needs_contrastive && !e.contrastive.is_some_and(f64::is_finite) {
            return Err(format!("epoch {} lacks the contrastive term", e.epoch));
        }
    }
    if rec.steps.is_empty() || rec.steps.iter().any(|s| !s.loss.is_finite()) {
        return Err("step log empty or non-finite".into());
    }
    Ok(())
}

fn criterion_8() -> Verdict {
    let src = seed_source(0);
    let base = src.resolve().unwrap();
    let (train, test) = base.data.load(base.data_seed()).unwrap();
    let poison = craft(&train, &RunConfig::for_generator(&src, Generator::Ue).unwrap().craft).unwrap();
    let mut c = Checks::default();
    let mut done = Vec::new();
    let mut runs: Vec<(String, ConfigSource)> = Vec::new();
    for m in [Method::Vespr, Method::VesprSsl, Method::VesprBoth] {
        let mut s = src.clone();
        s.set("train.method", Value::from(m.name())).unwrap();
        runs.push((m.name().to_string(), s));
    }
    for alpha in [0.05, 0.25, 0.5, 1.0, 5.0, 0.0] {
        let mut s = src.clone();
        s.set("train.method", Value::from("vespr")).unwrap();
        s.set("loss.alpha", Value::from(alpha)).unwrap();
        if alpha == 0.0 {
            s.set("loss.beta", Value::from(1.0)).unwrap();
        }
        runs.push((format!("alpha={alpha}"), s));
    }
    for (name, s) in runs {
        let cfg = s.resolve().unwrap();
        match fit(&cfg.train, &cfg.probe, &poison, Some(&test)) {
            Ok(out) => {
                let complete = record_complete(&out.record, cfg.train.epochs, cfg.train.weights.alpha > 0.0);
                c.check(complete.is_ok(), || format!("{name}: {}", complete.clone().unwrap_err()));
                let acc = out.test.map(|t| t.accuracy).unwrap_or(f64::NAN);
                c.check(acc.is_finite(), || format!("{name}: no test accuracy"));
                if cfg.train.weights.alpha == 0.0 {
                    let exact = out.record.steps.iter().all(|st| Some(st.loss) == st.cross_entropy);
                    c.check(exact, || format!("{name}: recorded loss differs from the CE term"));
                }
                done.push(format!("{name} {acc:.2}"));
            }
            Err(e) => c.check(false, || format!("{name}: {e}")),
        }
    }
    c.verdict(format!("test accuracy on the UE poison: {}", done.join(", ")))
}

// ----------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Verdict::new(false, format!("panicked: {msg}"))
        }
    }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for n in 1..=8 {
            println!("criterion_{n}: test");
        }
        return;
    }
    let picked: Vec<u32> = args
        .iter()
        .filter(|a| !a.starts_with('-'))
        .filter_map(|a| a.trim_start_matches("criterion_").parse().ok())
        .collect();
    let want = |n: u32| picked.is_empty() || picked.contains(&n);
    let names = [
        "PGD contract",
        "loss oracles",
        "metric oracles",
        "generator contracts",
        "shortcut learning",
        "defense ordering",
        "representation trends",
        "ablation machinery",
    ];
    let mut failed = 0;
    let mut report = |n: u32, v: Verdict, secs: f64| {
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {n} ({}): {status} [{secs:.1}s] {}", names[n as usize - 1], v.detail);
        failed += (!v.pass) as usize;
    };
    let simple: [(u32, fn() -> Verdict); 5] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
    ];
    for (n, f) in simple {
        if want(n) {
            let t = Instant::now();
            let v = guarded(f);
            report(n, v, t.elapsed().as_secs_f64());
        }
    }
    if want(6) || want(7) {
        let t = Instant::now();
        let benches = catch_unwind(|| (0..3).map(bench_for_seed).collect::<Vec<_>>());
        let secs = t.elapsed().as_secs_f64();
        match benches {
            Ok(b) => {
                // one shared 3-seed bench feeds both criteria
                if want(6) {
                    report(6, guarded(|| criterion_6(&b)), secs);
                }
                if want(7) {
                    report(7, guarded(|| criterion_7(&b)), secs);
                }
            }
            Err(_) => {
                for n in [6, 7].into_iter().filter(|&n| want(n)) {
                    report(n, Verdict::new(false, "bench panicked"), secs);
                }
            }
        }
    }
    if want(8) {
        let t = Instant::now();
        let v = guarded(criterion_8);
        report(8, v, t.elapsed().as_secs_f64());
    }
    let ran = (1..=8).filter(|&n| want(n)).count();
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed > 0 && args.iter().any(|a| a == "--strict") {
        std::process::exit(1);
    }
}
