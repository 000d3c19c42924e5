use std::path::PathBuf;

use decamel::camel::{camel_fit, f_consistency, f_constraint, f_intra, view_covariances, AsymmetricMetric, CamelConfig};
use decamel::clustering::{kmeans, ClusterState};
use decamel::dataset::{generate_synthetic, load_dataset, SyntheticConfig};
use decamel::decamel::{
    decamel_loss, decamel_train, freeze_variants, grad_metric, make_batches, refresh_clusters, DecamelConfig, Freeze,
};
use decamel::extractor::{Extractor, FeatureExtractor};
use decamel::features::ViewFeatures;
use decamel::persist::{load_model, save_model};
use decamel::pipeline::{train, TrainOptions};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn fixture() -> ViewFeatures {
    let ds = load_dataset(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/f1.csv")).unwrap();
    ViewFeatures::from_dataset(&ds)
}

fn fixture_init(features: &ViewFeatures) -> (AsymmetricMetric, ClusterState) {
    let fit = camel_fit(features, &CamelConfig { k: 2, ..Default::default() }).unwrap();
    (fit.metric, fit.state)
}

fn short_config() -> DecamelConfig {
    DecamelConfig { iterations: 200, batch_size: 8, refresh_period: 20, ..Default::default() }
}

fn random_features(r: &mut ChaCha8Rng, n: usize, d: usize, v: usize) -> ViewFeatures {
    let points = (0..n).map(|_| DVector::from_fn(d, |_, _| StandardNormal.sample(r))).collect();
    let views = (0..n).map(|i| if i < v { i } else { r.random_range(0..v) }).collect();
    ViewFeatures::new(points, views, v).unwrap()
}

fn random_metric(r: &mut ChaCha8Rng, v: usize, d: usize, t: usize) -> AsymmetricMetric {
    AsymmetricMetric::new((0..v).map(|_| DMatrix::from_fn(d, t, |_, _| StandardNormal.sample(r))).collect()).unwrap()
}

#[test]
fn smoothed_loss_decreases_on_fixture() {
    let features = fixture();
    let model = decamel_train(&features, Extractor::identity(2), fixture_init(&features), &short_config()).unwrap();
    let trace = &model.loss_trace;
    assert_eq!(trace.len(), 200);
    let window = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    assert!(window(&trace[180..]) <= window(&trace[..20]));
}

#[test]
fn zero_learning_rate_keeps_the_initialisation() {
    let features = fixture();
    let init = fixture_init(&features);
    let config = DecamelConfig { learning_rate: 0.0, ..short_config() };
    let model = decamel_train(&features, Extractor::linear(2), init.clone(), &config).unwrap();
    assert_eq!(model.metric, init.0);
    assert_eq!(model.extractor, Extractor::linear(2));
}

#[test]
fn frozen_components_stay_put() {
    let features = fixture();
    let init = fixture_init(&features);
    let config = short_config();
    let metric_frozen = freeze_variants(&features, Extractor::linear(2), init.clone(), &config, Freeze::Metric).unwrap();
    assert_eq!(metric_frozen.metric, init.0);
    assert_ne!(metric_frozen.extractor, Extractor::linear(2));

    let extractor_frozen =
        freeze_variants(&features, Extractor::linear(2), init.clone(), &config, Freeze::Extractor).unwrap();
    assert_eq!(extractor_frozen.extractor, Extractor::linear(2));
    assert_ne!(extractor_frozen.metric, init.0);

    let both = DecamelConfig { freeze_metric: true, freeze_extractor: true, ..config.clone() };
    let zero_lr = DecamelConfig { learning_rate: 0.0, ..config };
    let a = decamel_train(&features, Extractor::linear(2), init.clone(), &both).unwrap();
    let b = decamel_train(&features, Extractor::linear(2), init, &zero_lr).unwrap();
    assert_eq!(a, b);
}

#[test]
fn training_is_deterministic() {
    let ds = generate_synthetic(&SyntheticConfig { num_identities: 8, ..Default::default() }).unwrap();
    let options = TrainOptions {
        camel: CamelConfig { k: 8, ..Default::default() },
        decamel: DecamelConfig { iterations: 150, ..Default::default() },
        extractor: decamel::extractor::ExtractorKind::Mlp,
        seed: 11,
        ..Default::default()
    };
    assert_eq!(train(&ds, &options).unwrap(), train(&ds, &options).unwrap());
}

#[test]
fn saved_model_reloads_identically() {
    let ds = generate_synthetic(&SyntheticConfig { num_identities: 6, ..Default::default() }).unwrap();
    let options = TrainOptions {
        camel: CamelConfig { k: 6, ..Default::default() },
        decamel: DecamelConfig { iterations: 50, ..Default::default() },
        ..Default::default()
    };
    let mut model = train(&ds, &options).unwrap();
    model.trained.loss_trace.clear();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_model(&model, &path).unwrap();
    assert_eq!(load_model(&path).unwrap(), model);
}

#[test]
fn divergence_is_reported_as_a_training_error() {
    let features = fixture();
    let config = DecamelConfig { learning_rate: 1e3, ..short_config() };
    let err = decamel_train(&features, Extractor::linear(2), fixture_init(&features), &config).unwrap_err();
    assert!(matches!(err, decamel::Error::Training { .. }), "{err}");
}

#[test]
fn loss_matches_component_sum() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let features = random_features(&mut r, 20, 4, 3);
        let metric = random_metric(&mut r, 3, 4, 3);
        let state = kmeans(&metric.project_all(&features).unwrap(), 4, 0, 20).unwrap();
        let cov = view_covariances(&features).unwrap();
        let all: Vec<usize> = (0..features.len()).collect();
        let (lambda, gamma) = (0.3, 0.7);
        let loss = decamel_loss(&features, &all, &metric, &state, &cov, lambda, gamma).unwrap();
        let expected = f_intra(&features, &metric, &state).unwrap()
            + lambda * f_consistency(&metric)
            + gamma * f_constraint(&metric, &cov).unwrap();
        assert!((loss - expected).abs() <= 1e-12 * expected.abs());
    }
}

#[test]
fn gradients_vanish_at_the_minimum() {
    let features = fixture();
    let metric = AsymmetricMetric::identity(2, 2);
    let projected = metric.project_all(&features).unwrap();
    let state = ClusterState::new((0..8).collect(), projected).unwrap();
    let cov = view_covariances(&features).unwrap();
    let all: Vec<usize> = (0..8).collect();
    for g in grad_metric(&features, &all, &metric, &state, &cov, 0.0, 0.0).unwrap() {
        assert_eq!(g.norm(), 0.0);
    }
}

#[test]
fn batches_follow_view_shares_exactly() {
    let views: Vec<usize> = (0..400).map(|i| usize::from(i >= 100)).collect();
    let sampler = make_batches(&views, 2, 216, 9).unwrap();
    assert_eq!(sampler.counts(), &[54, 162]);
    for batch in sampler.take(10_000) {
        let first = batch.iter().filter(|&&i| views[i] == 0).count();
        assert_eq!((first, batch.len() - first), (54, 162));
    }
}

#[test]
fn single_view_batches_cover_the_view() {
    let mut seen = [false; 10];
    for batch in make_batches(&[0; 10], 1, 5, 1).unwrap().take(200) {
        assert_eq!(batch.len(), 5);
        for i in batch {
            seen[i] = true;
        }
    }
    assert!(seen.iter().all(|&s| s));
}

#[test]
fn refresh_at_a_fixpoint_changes_nothing() {
    let features = fixture();
    let (metric, state) = fixture_init(&features);
    let next = refresh_clusters(&features, &Extractor::identity(2), &metric, &state).unwrap();
    assert_eq!(next.assignments(), state.assignments());
}

#[test]
fn refresh_moves_only_the_displaced_point() {
    let pts: Vec<DVector<f64>> = [0.0, 0.2, 10.0, 10.2].iter().map(|&x| DVector::from_element(1, x)).collect();
    let features = ViewFeatures::new(pts, vec![0; 4], 1).unwrap();
    let metric = AsymmetricMetric::identity(1, 1);
    let state = ClusterState::from_assignments(features.points(), vec![0, 0, 1, 1], 2).unwrap();
    let mut moved = features.points().to_vec();
    moved[1] = DVector::from_element(1, 10.1);
    let moved = ViewFeatures::new(moved, vec![0; 4], 1).unwrap();
    let next = refresh_clusters(&moved, &Extractor::identity(1), &metric, &state).unwrap();
    assert_eq!(next.assignments(), &[0, 1, 1, 1]);
}

proptest! {
    #[test]
    fn refresh_never_increases_intra(seed in 0u64..500, k in 1usize..6) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let features = random_features(&mut r, 30, 3, 2);
        let metric = random_metric(&mut r, 2, 3, 3);
        let assignments: Vec<usize> = (0..30).map(|i| if i < k { i } else { r.random_range(0..k) }).collect();
        let centroids = (0..k).map(|_| DVector::from_fn(3, |_, _| StandardNormal.sample(&mut r))).collect();
        let state = ClusterState::new(assignments, centroids).unwrap();
        let next = refresh_clusters(&features, &Extractor::identity(3), &metric, &state).unwrap();
        let before = f_intra(&features, &metric, &state).unwrap();
        let after = f_intra(&features, &metric, &next).unwrap();
        prop_assert!(after <= before + 1e-9 * before.abs());
    }
}

#[test]
fn joint_training_matches_or_beats_initialisation() {
    let ds = generate_synthetic(&SyntheticConfig::default()).unwrap();
    let options = TrainOptions {
        camel: CamelConfig { k: 20, ..Default::default() },
        decamel: DecamelConfig { iterations: 2000, ..Default::default() },
        ..Default::default()
    };
    let eval = decamel::eval::ProtocolOptions { repetitions: 1, ..Default::default() };
    let model = train(&ds, &options).unwrap();
    let init = train(&ds, &TrainOptions { decamel: DecamelConfig { iterations: 0, ..options.decamel.clone() }, ..options })
        .unwrap();
    let rank1 = |m: &decamel::pipeline::Model| decamel::eval::run_protocol(&ds, m, &eval).unwrap().rank1();
    assert!(rank1(&model) >= rank1(&init));
    assert_eq!(init.trained.extractor.num_params(), model.trained.extractor.num_params());
}
