use otafl::learner::data::partition_noniid;
use otafl::learner::model::{loss, loss_and_grad};
use otafl::learner::{self, GaussianMixture, LocalDataset, ModelParams, ObjectiveSpec, Sample};
use otafl::rng::{stream, Purpose};
use rand::Rng;
use std::collections::BTreeMap;

fn small_data() -> Vec<Sample> {
    GaussianMixture {
        n_classes: 4,
        dim: 5,
        per_class: 10,
        separation: 2.0,
        noise_std: 1.0,
    }
    .generate(3)
    .unwrap()
    .samples
}

#[test]
fn gradient_matches_finite_differences() {
    let spec = ObjectiveSpec::new(5, vec![7, 6], 4, 1e-3).unwrap();
    let data = small_data();
    let mut rng = stream(1, 0, 0, Purpose::Search);
    for probe in 0..10 {
        // random point off the zero-bias initialization, where ReLU kinks sit exactly at 0
        let mut w = spec.init(probe);
        w.w.iter_mut().for_each(|v| *v += 0.2 * (rng.random::<f64>() - 0.5));
        let (_, g) = loss_and_grad(&spec, &w, &data);
        let v: Vec<f64> = (0..spec.dim()).map(|_| rng.random::<f64>() - 0.5).collect();
        let h = 1e-6;
        let shift = |s: f64| ModelParams {
            w: w.w.iter().zip(&v).map(|(a, b)| a + s * b).collect(),
        };
        let fd = (loss(&spec, &shift(h), &data) - loss(&spec, &shift(-h), &data)) / (2.0 * h);
        let an: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "probe {probe}: {fd} vs {an}");
    }
}

#[test]
fn minibatch_gradient_is_unbiased() {
    let spec = ObjectiveSpec::new(5, vec![6], 4, 0.0).unwrap();
    let samples = small_data();
    let ds = LocalDataset {
        owner: 0,
        labels: vec![0, 1, 2, 3],
        indices: (0..samples.len()).collect(),
        samples,
    };
    let w = spec.init(2);
    let (_, full) = learner::full_loss_and_grad(&spec, &w, &ds).unwrap();
    let trials = 20_000;
    let mut mean = vec![0.0; spec.dim()];
    let mut rng = stream(4, 0, 0, Purpose::Minibatch);
    for _ in 0..trials {
        let g = learner::local_gradient(&spec, &w, &ds, 5, 1e9, &mut rng).unwrap();
        mean.iter_mut().zip(&g).for_each(|(m, v)| *m += v / trials as f64);
    }
    let err: f64 = mean.iter().zip(&full).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = full.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(err < 0.03 * scale, "{err} vs {scale}");
}

#[test]
fn objective_is_not_convex() {
    // a midpoint-convexity violation along some random segment
    let spec = ObjectiveSpec::new(5, vec![4], 4, 0.0).unwrap();
    let data = small_data();
    let mut rng = stream(2, 0, 0, Purpose::Search);
    let found = (0..500).any(|_| {
        let a: Vec<f64> = (0..spec.dim()).map(|_| 2.0 * (rng.random::<f64>() - 0.5)).collect();
        let b: Vec<f64> = (0..spec.dim()).map(|_| 2.0 * (rng.random::<f64>() - 0.5)).collect();
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        let f = |w: Vec<f64>| loss(&spec, &ModelParams { w }, &data);
        f(mid) > 0.5 * (f(a) + f(b)) + 1e-9
    });
    assert!(found);
}

#[test]
fn label_skewed_partition_structure() {
    let data = GaussianMixture::default().generate(0).unwrap();
    let (train, _) = data.split_holdout(0.2, 0).unwrap();
    let parts = partition_noniid(&train, 10, 2, 5).unwrap();
    let mut owners: BTreeMap<usize, usize> = BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();
    for p in &parts {
        assert_eq!(p.labels.len(), 2);
        assert_eq!(p.len(), parts[0].len());
        let labels: std::collections::BTreeSet<usize> = p.samples.iter().map(|s| s.y).collect();
        assert_eq!(labels.len(), 2);
        for l in labels {
            *owners.entry(l).or_default() += 1;
        }
        for i in &p.indices {
            assert!(seen.insert(*i), "sample {i} assigned twice");
        }
    }
    assert!(owners.values().all(|c| *c == 2));
    assert_eq!(parts[0].len(), 200);
    assert!(partition_noniid(&train, 2, 2, 5).is_err());
}

#[test]
fn kappa_zero_for_identical_devices() {
    let spec = ObjectiveSpec::new(5, vec![4], 4, 0.0).unwrap();
    let samples = small_data();
    let ds = LocalDataset {
        owner: 0,
        labels: vec![],
        indices: vec![],
        samples,
    };
    let k = learner::estimate_kappa(&spec, &spec.init(0), &[ds.clone(), ds], 10.0).unwrap();
    assert!(k.abs() < 1e-12);
}
