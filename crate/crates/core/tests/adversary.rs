use ndarray::Array2;
use poisonforge::adversary::{attack_success_stats, pgd_attack, pgd_attack_input, AttackTarget, Guide, PgdConfig};
use poisonforge::data::make_toy_dataset;
use poisonforge::loss::{cross_entropy, cross_entropy_grad, LossWeights};
use poisonforge::model::{build_bundle, grad_wrt_input, Arch, BundleSpec, HeadGrads, HeadLoss, Heads, ModelBundle, NetworkBuilder};
use proptest::prelude::*;

fn mlp(shape: [usize; 3], k: usize, seed: u64) -> ModelBundle {
    let mut s = BundleSpec::new(Arch::Mlp, shape, 8, 8, k);
    s.hidden = 16;
    s.seed = seed;
    build_bundle(s).unwrap()
}

/// Bundle whose logits are an affine function of the input.
fn linear_binary(dim: usize, seed: u64) -> ModelBundle {
    let mut b = mlp([1, 1, dim], 2, seed);
    b.encoder = NetworkBuilder::new("encoder", dim, seed).dense(8).build();
    b
}

fn ce_objective(labels: &[usize]) -> impl Fn(&poisonforge::model::ForwardOutput) -> poisonforge::Result<HeadLoss> + '_ {
    move |out| {
        let (v, g) = cross_entropy_grad(out.logits.as_ref().unwrap(), labels)?;
        Ok(HeadLoss {
            value: v,
            grads: Some(HeadGrads {
                logits: Some(g),
                ..Default::default()
            }),
        })
    }
}

#[test]
fn pgd_matches_fgsm_closed_form_on_linear_model() {
    let dim = 12;
    for seed in 0..5 {
        let b = linear_binary(dim, seed);
        let x = Array2::from_shape_fn((6, dim), |(i, j)| 0.3 + 0.4 * (((i * 7 + j * 3) % 11) as f64 / 10.0));
        let labels = vec![0, 1, 0, 1, 1, 0];
        let (_, g) = grad_wrt_input(&b, &x, Heads::LOGITS, ce_objective(&labels)).unwrap();
        let eps = 8.0 / 255.0;
        let cfg = PgdConfig {
            epsilon: eps,
            step_size: eps / 4.0,
            steps: 20,
            random_start: false,
            restarts: 0,
            guide: Guide::Ce,
        };
        let delta = pgd_attack_input(&b, &x, &AttackTarget::labels(&labels), &cfg, true, seed).unwrap();
        for (d, gv) in delta.iter().zip(g.iter()) {
            let want = eps * gv.signum();
            assert!((d - want).abs() < 1e-12, "delta {d} vs closed form {want}");
        }
    }
}

#[test]
fn default_config_values() {
    let c = PgdConfig::default();
    assert!((c.epsilon - 4.0 / 255.0).abs() < 1e-15);
    assert!((c.step_size - 0.6 / 255.0).abs() < 1e-15);
    assert_eq!(c.steps, 10);
    assert!(c.random_start);
    assert_eq!(c.restarts, 0);
}

#[test]
fn parameters_are_not_modified_by_attack() {
    let data = make_toy_dataset(3, 4, 8, 1).unwrap();
    let b = mlp([3, 8, 8], 3, 2);
    let before = b.clone();
    pgd_attack(&b, &data, &AttackTarget::labels(data.labels()), &PgdConfig::default(), true, 0).unwrap();
    assert_eq!(b, before);
}

#[test]
fn larger_budget_reaches_higher_loss() {
    let data = make_toy_dataset(3, 4, 8, 1).unwrap();
    let x = data.to_input();
    for seed in 0..4 {
        let b = mlp([3, 8, 8], 3, seed);
        let run = |eps: f64| {
            let cfg = PgdConfig {
                epsilon: eps,
                step_size: 0.5 / 255.0,
                steps: 60,
                random_start: false,
                restarts: 0,
                guide: Guide::Ce,
            };
            let d = pgd_attack_input(&b, &x, &AttackTarget::labels(data.labels()), &cfg, true, seed).unwrap();
            let logits = b.forward_input(&(&x + &d), Heads::LOGITS).unwrap().logits.unwrap();
            cross_entropy(&logits, data.labels()).unwrap()
        };
        assert!(run(8.0 / 255.0) >= run(4.0 / 255.0) - 1e-9);
    }
}

#[test]
fn attack_is_deterministic_for_each_guide() {
    let data = make_toy_dataset(2, 4, 8, 3).unwrap();
    let x = data.to_input();
    let pos = x.mapv(|v| (v * 0.9).clamp(0.0, 1.0));
    let b = mlp([3, 8, 8], 2, 1);
    for guide in [Guide::Ce, Guide::Contrastive, Guide::Combined] {
        let cfg = PgdConfig {
            guide,
            restarts: 1,
            ..PgdConfig::default()
        };
        let t = AttackTarget::both(data.labels(), &pos, LossWeights::default());
        let a = pgd_attack_input(&b, &x, &t, &cfg, true, 9).unwrap();
        let c = pgd_attack_input(&b, &x, &t, &cfg, true, 9).unwrap();
        assert_eq!(a, c);
    }
}

#[test]
fn untrained_model_stats_are_finite() {
    let data = make_toy_dataset(4, 5, 8, 4).unwrap();
    let b = mlp([3, 8, 8], 4, 5);
    let x = data.to_input();
    let d = pgd_attack_input(&b, &x, &AttackTarget::labels(data.labels()), &PgdConfig::default(), true, 1).unwrap();
    let s = attack_success_stats(&b, &x, data.labels(), &d).unwrap();
    assert!(s.mean_loss_increase.is_finite());
    assert!((0.0..=1.0).contains(&s.flip_rate));
    assert!(s.mean_loss_increase >= 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn projection_keeps_budget_and_pixel_box(
        seed in 0u64..1000,
        eps_num in 0u32..20,
        steps in 0usize..6,
        maximize in any::<bool>(),
        guide_ix in 0usize..3,
    ) {
        let data = make_toy_dataset(2, 3, 8, seed).unwrap();
        let x = data.to_input();
        let pos = x.mapv(|v| 1.0 - v);
        let b = mlp([3, 8, 8], 2, seed);
        let eps = eps_num as f64 / 255.0;
        let cfg = PgdConfig {
            epsilon: eps,
            step_size: 2.0 / 255.0,
            steps,
            random_start: true,
            restarts: 0,
            guide: [Guide::Ce, Guide::Contrastive, Guide::Combined][guide_ix],
        };
        let t = AttackTarget::both(data.labels(), &pos, LossWeights::default());
        let d = pgd_attack_input(&b, &x, &t, &cfg, maximize, seed).unwrap();
        for (dv, xv) in d.iter().zip(x.iter()) {
            prop_assert!(dv.abs() <= eps + 1e-7);
            let v = xv + dv;
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}
