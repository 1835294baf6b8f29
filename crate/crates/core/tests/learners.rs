use higate::learners::{
    logistic_loss_and_grad, train_linear_svm, train_logistic_traced, train_random_forest,
    GateHyper, GateModel, LearnerKind, Standardizer,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let pos = i % 2 == 0;
        let cx = if pos { 2.0 } else { -2.0 };
        x.push(vec![cx + noise.sample(&mut rng), noise.sample(&mut rng)]);
        y.push(pos);
    }
    (x, y)
}

fn noisy_data(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let y = x
        .iter()
        .map(|r| r.iter().sum::<f64>() + rng.random_range(-0.5..0.5) > 0.0)
        .collect();
    (x, y)
}

#[test]
fn standardized_columns_have_zero_mean_unit_std() {
    let (x, _) = noisy_data(200, 5, 1);
    let x: Vec<Vec<f64>> = x
        .into_iter()
        .map(|r| r.iter().map(|v| v * 7.0 + 3.0).collect())
        .collect();
    let s = Standardizer::fit(&x).unwrap();
    let z = s.apply_all(&x).unwrap();
    for j in 0..5 {
        let mean = z.iter().map(|r| r[j]).sum::<f64>() / 200.0;
        let var = z.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / 200.0;
        assert!(mean.abs() < 1e-9);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn logistic_loss_is_monotone_on_standardized_data() {
    for seed in 0..5 {
        let (x, y) = noisy_data(300, 6, seed);
        let z = Standardizer::fit(&x).unwrap().apply_all(&x).unwrap();
        let (_, losses) = train_logistic_traced(&z, &y, &GateHyper::default()).unwrap();
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss rose: {} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn logistic_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..10 {
        let (x, y) = noisy_data(5, 3, rng.random());
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = rng.random_range(-0.5..0.5);
        let (_, gw, gb) = logistic_loss_and_grad(&x, &y, &w, b, 0.01);
        let h = 1e-5;
        for j in 0..3 {
            let mut up = w.clone();
            let mut dn = w.clone();
            up[j] += h;
            dn[j] -= h;
            let num = (logistic_loss_and_grad(&x, &y, &up, b, 0.01).0
                - logistic_loss_and_grad(&x, &y, &dn, b, 0.01).0)
                / (2.0 * h);
            assert!((num - gw[j]).abs() / num.abs().max(gw[j].abs()).max(1e-8) <= 1e-5);
        }
        let num = (logistic_loss_and_grad(&x, &y, &w, b + h, 0.01).0
            - logistic_loss_and_grad(&x, &y, &w, b - h, 0.01).0)
            / (2.0 * h);
        assert!((num - gb).abs() / num.abs().max(gb.abs()).max(1e-8) <= 1e-5);
    }
}

#[test]
fn svm_separates_blobs_on_held_out_samples() {
    let (x, y) = blobs(400, 1);
    let (xt, yt) = blobs(200, 2);
    let model = train_linear_svm(&x, &y, &GateHyper::default(), 5).unwrap();
    let acc = xt
        .iter()
        .zip(&yt)
        .filter(|(xi, yi)| (model.margin(xi).unwrap() >= 0.0) == **yi)
        .count() as f64
        / xt.len() as f64;
    assert_eq!(acc, 1.0);
    assert_eq!(
        model,
        train_linear_svm(&x, &y, &GateHyper::default(), 5).unwrap()
    );
}

#[test]
fn deep_tree_memorises_random_consistent_data() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let y: Vec<bool> = (0..50).map(|_| rng.random_bool(0.5)).collect();
        let mut h = GateHyper::with_kind(LearnerKind::Rf);
        h.forest.num_trees = 1;
        h.forest.max_depth = None;
        h.forest.min_leaf = 1;
        h.forest.bootstrap = false;
        let f = train_random_forest(&x, &y, &h, seed).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert_eq!(f.score(xi).unwrap() >= 0.5, *yi);
        }
    }
}

#[test]
fn forest_score_is_mean_of_independent_tree_scores() {
    let (x, y) = noisy_data(300, 5, 9);
    let mut h = GateHyper::with_kind(LearnerKind::Rf);
    h.forest.num_trees = 15;
    let f = train_random_forest(&x, &y, &h, 3).unwrap();
    for xi in x.iter().take(50) {
        let mean = f.trees.iter().map(|t| t.score(xi)).sum::<f64>() / 15.0;
        assert!((f.score(xi).unwrap() - mean).abs() < 1e-15);
    }
    assert_eq!(f, train_random_forest(&x, &y, &h, 3).unwrap());
    assert_ne!(f, train_random_forest(&x, &y, &h, 4).unwrap());
}

#[test]
fn forest_respects_depth_and_leaf_limits() {
    let (x, y) = noisy_data(400, 4, 2);
    let mut h = GateHyper::with_kind(LearnerKind::Rf);
    h.forest.num_trees = 5;
    h.forest.max_depth = Some(3);
    h.forest.min_leaf = 10;
    let f = train_random_forest(&x, &y, &h, 1).unwrap();
    for t in &f.trees {
        // a binary tree of depth <= 3 has at most 15 nodes
        assert!(t.nodes.len() <= 15);
    }
}

#[test]
fn gate_models_beat_chance_on_learnable_data() {
    let (x, y) = noisy_data(600, 4, 4);
    let (xt, yt) = noisy_data(300, 4, 5);
    for kind in [LearnerKind::Lr, LearnerKind::Svm, LearnerKind::Rf] {
        let mut h = GateHyper::with_kind(kind);
        h.forest.num_trees = 30;
        let m = GateModel::train(&x, &y, &h, 1).unwrap();
        let acc = xt
            .iter()
            .zip(&yt)
            .filter(|(xi, yi)| (m.predict_score(xi).unwrap() >= 0.5) == **yi)
            .count() as f64
            / xt.len() as f64;
        assert!(acc > 0.8, "{kind:?}: {acc}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scores_stay_in_unit_interval(seed in any::<u64>(), probe in prop::collection::vec(-1e6f64..1e6, 3)) {
        let (x, y) = noisy_data(60, 3, seed);
        for kind in [LearnerKind::Lr, LearnerKind::Svm, LearnerKind::Rf] {
            let mut h = GateHyper::with_kind(kind);
            h.forest.num_trees = 5;
            let m = GateModel::train(&x, &y, &h, seed).unwrap();
            let s = m.predict_score(&probe).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}
