mod common;

use common::{brute_knn, corner_max, cos, identity_bundle, mlp_bundle};
use ndarray::{array, Array2};
use poisonforge::analysis::{
    analysis_report, effective_rank, export_embeddings, in_class_similarity, knn_eval, load_embeddings,
    local_lipschitz, paired_similarity, AnalysisConfig, RepresentationMatrix,
};
use poisonforge::data::container::Container;
use poisonforge::data::{load_dataset, make_toy_dataset};
use poisonforge::poisoncraft::{craft, Generator, GeneratorConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Map;

fn rm(reps: Array2<f64>, labels: Vec<usize>) -> RepresentationMatrix {
    let ids = (0..labels.len()).map(|i| format!("s-{i}")).collect();
    RepresentationMatrix::new(reps, labels, ids).unwrap()
}

#[test]
fn in_class_similarity_cases() {
    let ortho = rm(array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 3.0]], vec![0, 0, 1, 1]);
    assert!(in_class_similarity(&ortho).unwrap().abs() < 1e-12);

    let r = array![[1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [-1.0, 2.0]];
    let labels = vec![0, 0, 0, 1];
    let want = (cos(&[1.0, 0.0], &[1.0, 1.0]) + cos(&[1.0, 0.0], &[0.0, 1.0]) + cos(&[1.0, 1.0], &[0.0, 1.0])) / 3.0;
    let m = rm(r.clone(), labels.clone());
    assert!(in_class_similarity(&m).is_err(), "singleton class must be rejected");
    let r5 = array![[1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [-1.0, 2.0], [-1.0, 2.0]];
    let got = in_class_similarity(&rm(r5, vec![0, 0, 0, 1, 1])).unwrap();
    assert!((got - (3.0 * want + 1.0) / 4.0).abs() < 1e-12);

    // per-row positive rescaling does not matter
    let scaled = array![[3.0, 0.0], [0.5, 0.5], [0.0, 9.0], [-1.0, 2.0], [-2.0, 4.0]];
    assert!((in_class_similarity(&rm(scaled, vec![0, 0, 0, 1, 1])).unwrap() - got).abs() < 1e-12);
}

#[test]
fn paired_similarity_cases() {
    let a = rm(array![[1.0, 2.0], [0.0, 1.0], [3.0, -1.0]], vec![0, 1, 0]);
    assert!((paired_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let neg = rm(-a.reps().clone(), vec![0, 1, 0]);
    assert!((paired_similarity(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
    let b = rm(array![[2.0, 1.0], [1.0, 1.0], [1.0, 3.0]], vec![0, 1, 0]);
    let want = (4.0 / (5f64.sqrt() * 5f64.sqrt()) + 1.0 / 2f64.sqrt() + 0.0) / 3.0;
    assert!((paired_similarity(&a, &b).unwrap() - want).abs() < 1e-12);
    let shuffled =
        RepresentationMatrix::new(b.reps().clone(), vec![0, 1, 0], vec!["x".into(), "y".into(), "z".into()]).unwrap();
    assert!(paired_similarity(&a, &shuffled).is_err());
}

#[test]
fn effective_rank_reference_spectra() {
    let line = array![[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [-1.0, -2.0, 0.0], [0.5, 1.0, 0.0]];
    assert!((effective_rank(&line).unwrap() - 1.0).abs() < 1e-6);
    for d in 1..=4 {
        let mut m = Array2::zeros((2 * d, d));
        for i in 0..d {
            m[[2 * i, i]] = 1.0;
            m[[2 * i + 1, i]] = -1.0;
        }
        assert!((effective_rank(&m).unwrap() - d as f64).abs() < 1e-6);
    }
    let two = array![[0.9, 0.0], [-0.9, 0.0], [0.0, 0.1], [0.0, -0.1]];
    let want = (-(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln())).exp();
    assert!((effective_rank(&two).unwrap() - want).abs() < 1e-6);
    assert!((want - 1.3841).abs() < 1e-4);
}

#[test]
fn effective_rank_invariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = Array2::from_shape_fn((12, 3), |_| rng.random_range(-1.0..1.0));
    let e = effective_rank(&m).unwrap();
    assert!((1.0..=3.0 + 1e-9).contains(&e));
    assert!((effective_rank(&(&m * 4.5)).unwrap() - e).abs() < 1e-9);
    let (c, s) = (0.6f64, 0.8f64);
    let rot = array![[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
    assert!((effective_rank(&m.dot(&rot)).unwrap() - e).abs() < 1e-9);
}

#[test]
fn knn_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..100 {
        let n = rng.random_range(1..=50);
        let q = rng.random_range(1..=10);
        let d = rng.random_range(2..=4);
        let classes = rng.random_range(2..=4);
        let train = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let queries = Array2::from_shape_fn((q, d), |_| rng.random_range(-1.0..1.0));
        let qlabels: Vec<usize> = (0..q).map(|_| rng.random_range(0..classes)).collect();
        let k = rng.random_range(1..=n.min(20));
        let want = brute_knn(&train, &labels, &queries, k);
        let acc_want = want.iter().zip(&qlabels).filter(|(a, b)| a == b).count() as f64 / q as f64;
        let got = knn_eval(&rm(train, labels), &rm(queries, qlabels), k, n, trial).unwrap();
        assert_eq!(got, acc_want, "trial {trial}");
    }
}

#[test]
fn knn_degenerate_cases() {
    let one = rm(array![[1.0, 0.0]], vec![2]);
    let tests = rm(array![[0.0, 1.0], [-1.0, 0.0], [1.0, 1.0]], vec![2, 2, 2]);
    assert_eq!(knn_eval(&one, &tests, 1, 1, 0).unwrap(), 1.0);
    assert!(knn_eval(&one, &tests, 1, 0, 0).is_err());

    let train = rm(array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]], vec![0, 1, 2, 3]);
    let probe = rm(array![[0.0, 1.0], [-1.0, 0.0]], vec![1, 2]);
    assert_eq!(knn_eval(&train, &probe, 1, 4, 0).unwrap(), 1.0);
}

#[test]
fn knn_hand_built_twelve_points() {
    // three clusters of four on the unit circle
    let angles = [0.0, 0.1, 0.2, 0.3, 2.0, 2.1, 2.2, 2.3, 4.0, 4.1, 4.2, 4.3f64];
    let train = Array2::from_shape_fn((12, 2), |(i, j)| if j == 0 { angles[i].cos() } else { angles[i].sin() });
    let labels: Vec<usize> = (0..12).map(|i| i / 4).collect();
    let q_angles = [0.15, 1.15, 2.25, 3.2, 4.05, 5.2f64];
    let queries = Array2::from_shape_fn((6, 2), |(i, j)| if j == 0 { q_angles[i].cos() } else { q_angles[i].sin() });
    let want = brute_knn(&train, &labels, &queries, 3);
    assert_eq!(want, vec![0, 0, 1, 2, 2, 2]);
    let got = knn_eval(&rm(train, labels), &rm(queries, want.clone()), 3, 12, 0).unwrap();
    assert_eq!(got, 1.0);
}

#[test]
fn local_lipschitz_identity_and_constant() {
    let b = identity_bundle([1, 2, 2], 2, 0);
    let x = array![[0.3, 0.6, 0.5, 0.2]];
    let r = 8.0 / 255.0;
    let truth = corner_max(|v| b.encoder.forward(v).unwrap(), x.row(0).as_slice().unwrap(), r);
    assert!((truth - 4.0).abs() < 1e-9);
    let est = local_lipschitz(&b, &x, r, 10, 1).unwrap();
    assert!(est >= 0.9 * truth && est <= truth + 1e-6, "{est} vs {truth}");

    let mut c = identity_bundle([1, 2, 2], 2, 0);
    c.encoder = poisonforge::model::NetworkBuilder::new("encoder", 4, 0).dense(3).build();
    for v in c.encoder.params.values_mut() {
        *v = 0.0;
    }
    assert_eq!(local_lipschitz(&c, &x, r, 5, 0).unwrap(), 0.0);
    assert!(local_lipschitz(&c, &x, 0.0, 5, 0).is_err());
}

#[test]
fn local_lipschitz_never_exceeds_corner_maximum() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for seed in 0..30 {
        let b = mlp_bundle([1, 2, 2], 2, seed);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..0.9)).collect();
        let xa = Array2::from_shape_vec((1, 4), x.clone()).unwrap();
        let r = rng.random_range(0.005..0.1);
        let truth = corner_max(|v| b.encoder.forward(v).unwrap(), &x, r);
        let est = local_lipschitz(&b, &xa, r, 10, seed).unwrap();
        assert!(est <= truth + 1e-6, "seed {seed}: {est} > {truth}");
        assert!(est > 0.0);
    }
}

#[test]
fn local_lipschitz_small_radius_tracks_directional_derivative() {
    // Scalar ReLU encoder: near x it is linear, so the best corner
    // direction is sign(∇f) and the ratio tends to ‖∇f(x)‖₁.
    let mut b = identity_bundle([1, 2, 2], 2, 0);
    b.encoder = poisonforge::model::NetworkBuilder::new("encoder", 4, 5).dense(8).relu().dense(1).build();
    for (seed, x) in [[0.4, 0.5, 0.6, 0.3], [0.1, 0.9, 0.2, 0.7], [0.5, 0.5, 0.5, 0.5]].iter().enumerate() {
        let xa = Array2::from_shape_vec((1, 4), x.to_vec()).unwrap();
        let f = |v: &Array2<f64>| b.encoder.forward(v).unwrap()[[0, 0]];
        let grad = common::numeric_grad(f, &xa, 1e-6);
        let l1: f64 = grad.iter().map(|g| g.abs()).sum();
        let est = local_lipschitz(&b, &xa, 1e-4, 10, seed as u64).unwrap();
        assert!((est - l1).abs() <= 0.1 * l1, "{est} vs {l1}");
    }
}

#[test]
fn report_on_untrained_encoder_is_finite() {
    let clean = make_toy_dataset(3, 4, 8, 2).unwrap();
    let p = craft(&clean, &GeneratorConfig::new(Generator::Lsp).with_seed(1)).unwrap();
    let b = mlp_bundle([3, 8, 8], 3, 4);
    let rep = analysis_report(&b, &p, &AnalysisConfig::default()).unwrap();
    for v in [rep.in_cls_sim_psn, rep.psn_cln_sim, rep.e_rank_psn, rep.local_lip_psn] {
        assert!(v.is_finite());
    }
    assert_eq!(rep.samples, 12);
}

#[test]
fn embeddings_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = rm(array![[1.0, 0.25], [0.1, -3.0]], vec![1, 0]);
    let path = dir.path().join("e.bin");
    export_embeddings(&m, &path, Map::new()).unwrap();
    assert_eq!(load_embeddings(&path).unwrap(), m);

    let empty = rm(Array2::zeros((0, 5)), vec![]);
    let p2 = dir.path().join("empty.bin");
    export_embeddings(&empty, &p2, Map::new()).unwrap();
    let back = load_embeddings(&p2).unwrap();
    assert_eq!(back.len(), 0);
    assert_eq!(back.reps().ncols(), 5);

    // the generic container reader used for datasets reads it too
    let c = Container::read(&path).unwrap();
    assert_eq!(c.kind, "embeddings");
    assert_eq!(c.array("reps").unwrap().shape, vec![2, 2]);
    assert_eq!(c.meta_field("ids").unwrap(), &serde_json::json!(["s-0", "s-1"]));
    let err = load_dataset(&path).unwrap_err().to_string();
    assert!(err.contains("kind"), "{err}");
}
