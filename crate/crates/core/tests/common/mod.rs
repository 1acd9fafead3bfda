#![allow(dead_code)]

use clare::{generate_synthetic, EmbeddingStore, SynthSpec};

/// Small well-separated store for fast tests.
pub fn store(classes: usize, train: usize, test: usize, dim: usize, seed: u64) -> EmbeddingStore {
    generate_synthetic(&SynthSpec {
        num_classes: classes,
        dim,
        train_per_class: train,
        test_per_class: test,
        mean_radius: 10.0,
        noise_sigma: 1.0,
        seed,
    })
    .unwrap()
}

/// The reference synthetic store: 10 classes in 512 dimensions, radius/sigma = 10.
pub fn reference_store(seed: u64) -> EmbeddingStore {
    generate_synthetic(&SynthSpec { seed, ..SynthSpec::default() }).unwrap()
}

/// Accuracy of the nearest-class-mean classifier, means taken over the training split.
pub fn nearest_mean_accuracy(store: &EmbeddingStore) -> f64 {
    let c = store.num_classes();
    let dim = store.dim();
    let mut sums = vec![vec![0.0f64; dim]; c];
    let mut counts = vec![0usize; c];
    for r in store.train() {
        counts[r.label as usize] += 1;
        for (s, &x) in sums[r.label as usize].iter_mut().zip(&r.vector) {
            *s += f64::from(x);
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= n as f64);
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for r in store.test() {
        let dist = |m: &Vec<f64>| m.iter().zip(&r.vector).map(|(a, &b)| (a - f64::from(b)).powi(2)).sum::<f64>();
        let best = (0..c).min_by(|&a, &b| dist(&sums[a]).total_cmp(&dist(&sums[b]))).unwrap();
        hit += usize::from(best == r.label as usize);
        total += 1;
    }
    hit as f64 / total as f64
}
