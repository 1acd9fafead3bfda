mod common;

use std::collections::BTreeSet;

use clare::dynnan::DynNan;
use clare::memory::TrainingSet;
use clare::metrics::{evaluate_snapshot, Predictions};
use clare::optim::{dataset_loss, train_task, train_task_observed, OptimConfig, Strategy};
use clare::{EmbeddingRecord, EmbeddingStore, Split, SynthSpec};
use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn training_set(store: &EmbeddingStore) -> TrainingSet {
    TrainingSet::from_pairs(store.dim(), store.train().map(|r| (r.vector.as_slice(), r.label))).unwrap()
}

fn train_accuracy(model: &DynNan<f32>, set: &TrainingSet) -> f64 {
    let x = ArrayView2::from_shape((set.len(), set.dim()), set.features()).unwrap();
    let predicted = model.predict_batch(x).unwrap();
    predicted.iter().zip(set.labels()).filter(|(p, l)| p == l).count() as f64 / set.len() as f64
}

#[test]
fn reference_store_is_separable_by_class_means() {
    let store = common::reference_store(0);
    let acc = common::nearest_mean_accuracy(&store);
    assert!(acc >= 0.99, "nearest-class-mean accuracy {acc}");
}

#[test]
fn one_task_on_separable_store_reaches_full_train_accuracy() {
    let store = clare::generate_synthetic(&SynthSpec { train_per_class: 100, test_per_class: 10, ..Default::default() }).unwrap();
    assert!(common::nearest_mean_accuracy(&store) >= 0.99);
    let set = training_set(&store);
    let classes: Vec<u16> = (0..10).collect();
    let mut model = DynNan::<f32>::init(512, &classes, 1).unwrap();
    let config = OptimConfig::default();
    let mut buffer_loss = Vec::new();
    let report = train_task_observed(&mut model, &set, &config, Strategy::Scratch, 1, 1, |_, m| {
        buffer_loss.push(dataset_loss(m, &set)?);
        Ok(())
    })
    .unwrap();
    let acc = train_accuracy(&model, &set);
    assert!(acc >= 0.99, "train accuracy {acc}");

    // smoke property: over the last cosine cycle the buffer loss does not go up
    let last_start = *config.cycle_starts().last().unwrap() as usize;
    let tail = &buffer_loss[last_start..];
    let violations = tail.windows(2).filter(|w| w[1] > w[0] + 1e-3).count();
    assert!(violations <= 2, "{violations} increases in {tail:?}");
    assert_eq!(report.steps, config.epochs_per_task * set.len().div_ceil(config.batch_size));
}

#[test]
fn training_is_deterministic() {
    let store = common::store(4, 30, 2, 8, 5);
    let set = training_set(&store);
    let config = OptimConfig { epochs_per_task: 4, ..Default::default() };
    let run = |strategy| {
        let mut m = DynNan::<f32>::with_hidden(8, [16, 16], &[0, 1, 2, 3], 2).unwrap();
        let report = train_task(&mut m, &set, &config, strategy, 7, 3).unwrap();
        (m, report)
    };
    assert_eq!(run(Strategy::Scratch), run(Strategy::Scratch));
    assert_eq!(run(Strategy::FineTune), run(Strategy::FineTune));
    assert_ne!(run(Strategy::Scratch).0, run(Strategy::FineTune).0);
}

#[test]
fn fixed_predictor_on_random_labels_scores_one_in_ten() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 20_000;
    let records = (0..n)
        .map(|i| EmbeddingRecord {
            sample_id: i,
            split: Split::Test,
            label: rng.random_range(0..10),
            vector: (0..6).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        })
        .collect();
    let names = (0..10).map(|i| format!("c{i}")).collect();
    let store = EmbeddingStore::new(6, names, records).unwrap();
    let classes: Vec<u16> = (0..10).collect();
    let model = DynNan::<f32>::with_hidden(6, [12, 12], &classes, 4).unwrap();
    let seen: BTreeSet<u16> = classes.iter().copied().collect();
    let acc = evaluate_snapshot(&model, &store, &seen).unwrap();
    let sigma = (0.1f64 * 0.9 / n as f64).sqrt();
    assert!((acc - 0.1).abs() <= 3.0 * sigma, "accuracy {acc}");

    // every eligible test sample is counted exactly once
    let subset: BTreeSet<u16> = [1, 4, 7].into();
    let p = Predictions::compute(&model, &store, &subset).unwrap();
    assert_eq!(p.pairs.len(), store.test().filter(|r| subset.contains(&r.label)).count());
}

#[test]
fn constant_predictor_on_single_class_scores_one() {
    let store = common::store(1, 3, 5, 2, 0);
    let model = DynNan::<f32>::with_hidden(2, [2, 2], &[0], 0).unwrap();
    assert_eq!(evaluate_snapshot(&model, &store, &[0].into()).unwrap(), 1.0);
}
