use clare::dynnan::{mix_batch, DynNan, Gradients, Targets};
use clare::seed;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_model(seed: u64, dim: usize, hidden: [usize; 2], classes: usize) -> DynNan<f64> {
    let ids: Vec<u16> = (0..classes as u16).collect();
    let mut model = DynNan::<f64>::with_hidden(dim, hidden, &ids, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(!seed);
    for p in model.params_mut() {
        *p = rng.random_range(-1.0..1.0);
    }
    model
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cross_entropy_matches_log_softmax(seed in any::<u64>(), n in 1usize..8, c in 1usize..7, scale in 0.1f64..50.0) {
        let model = random_model(seed, 4, [6, 5], c);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((n, 4), || scale * rng.random_range(-1.0..1.0));
        let cols: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let logits = model.logits(x.view()).unwrap();
        let expected: f64 = logits
            .rows()
            .into_iter()
            .zip(&cols)
            .map(|(row, &t)| {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                m + z.ln() - row[t]
            })
            .sum::<f64>()
            / n as f64;
        let (loss, _) = model.loss_and_grad(x.view(), &Targets::plain(cols), 0.0).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert!((loss - expected).abs() <= 1e-12 * expected.abs().max(1.0), "{} vs {}", loss, expected);
    }

    #[test]
    fn softmax_gradient_sums_to_zero_per_batch(seed in any::<u64>(), n in 1usize..8, c in 1usize..7, lambda in 0.0f64..=1.0) {
        // each row of softmax(z) - mix(onehot) sums to zero, so the output-bias gradient does too
        let model = random_model(seed, 3, [4, 4], c);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((n, 3), || rng.random_range(-2.0..2.0));
        let a = (0..n).map(|_| rng.random_range(0..c)).collect();
        let b = (0..n).map(|_| rng.random_range(0..c)).collect();
        let (_, grads) = model.loss_and_grad(x.view(), &Targets::mixed(a, b, lambda), 1e-4).unwrap();
        prop_assert!(grads.layers[2].bias.sum().abs() < 1e-12);
    }

    #[test]
    fn huge_logits_stay_finite(seed in any::<u64>()) {
        let model = random_model(seed, 2, [3, 3], 4);
        let x = Array2::from_shape_vec((2, 2), vec![1e6, -1e6, -1e6, 1e6]).unwrap();
        let (loss, grads) = model.loss_and_grad(x.view(), &Targets::plain(vec![0, 3]), 0.0).unwrap();
        prop_assert!(loss.is_finite());
        prop_assert!(grads.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn snapshot_round_trip_is_bitwise(seed in any::<u64>(), dim in 1usize..10, h1 in 1usize..10, h2 in 1usize..10, c in 1usize..6) {
        let classes: Vec<u16> = (0..c as u16).map(|i| i * 7 + 1).collect();
        let model = DynNan::<f32>::with_hidden(dim, [h1, h2], &classes, seed).unwrap();
        let mut bytes = Vec::new();
        model.write_snapshot(&mut bytes).unwrap();
        let back = DynNan::<f32>::read_snapshot(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(back.classes(), model.classes());
        prop_assert!(back.params().zip(model.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn beta_one_one_mixing_weight_is_uniform() {
    let mut rng = seed::rng(11);
    let batch = Array2::<f32>::zeros((2, 1));
    let n = 100_000;
    let mut sum = 0.0;
    let mut below_quarter = 0usize;
    for _ in 0..n {
        let (_, t) = mix_batch(batch.clone(), vec![0, 1], 1.0, 1.0, &mut rng).unwrap();
        assert!((0.0..=1.0).contains(&t.lambda));
        sum += t.lambda;
        below_quarter += usize::from(t.lambda < 0.25);
    }
    let mean = sum / n as f64;
    assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    let frac = below_quarter as f64 / n as f64;
    assert!((frac - 0.25).abs() < 4.0 * (0.25f64 * 0.75 / n as f64).sqrt(), "P(λ<¼) = {frac}");
}

#[test]
fn mixing_fires_with_the_configured_probability() {
    let mut rng = seed::rng(12);
    let batch = Array2::<f32>::zeros((3, 1));
    let n = 100_000;
    let fired = (0..n)
        .filter(|_| mix_batch(batch.clone(), vec![0, 1, 2], 0.5, 1.0, &mut rng).unwrap().1.lambda != 1.0)
        .count();
    let sigma = (0.25 / n as f64).sqrt();
    assert!((fired as f64 / n as f64 - 0.5).abs() < 3.0 * sigma, "fired {fired}");
}

#[test]
fn quadratic_bowl_contracts_geometrically() {
    // loss ½‖θ‖² has gradient θ, so each step scales every parameter by (1 − lr)
    let mut model = random_model(5, 2, [3, 2], 2);
    let start: Vec<f64> = model.params().copied().collect();
    let lr = 0.1;
    let mut prev = start.clone();
    for _ in 0..100 {
        let grads = Gradients { layers: model.layers().clone() };
        model.sgd_step(&grads, lr).unwrap();
        let now: Vec<f64> = model.params().copied().collect();
        assert!(now.iter().zip(&prev).all(|(a, b)| a.abs() <= b.abs()));
        prev = now;
    }
    let factor = (1.0 - lr).powi(100);
    for (end, s) in prev.iter().zip(&start) {
        assert!((end - s * factor).abs() <= 1e-12 * s.abs().max(1e-300));
    }
}

#[test]
fn expansion_is_seeded() {
    let mut a = DynNan::<f32>::with_hidden(4, [5, 5], &[0, 1], 1).unwrap();
    let mut b = a.clone();
    a.expand(&[2, 3], 9).unwrap();
    b.expand(&[2, 3], 9).unwrap();
    assert_eq!(a, b);
    let mut c = DynNan::<f32>::with_hidden(4, [5, 5], &[0, 1], 1).unwrap();
    c.expand(&[2, 3], 10).unwrap();
    assert_ne!(a, c);
}
