use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_batch(n: usize, dim: usize, classes: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_simple_fn((n, dim), || rng.random_range(-2.0..2.0));
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (x, y)
}

fn loss_of(params: &NetworkParams, batch: &LabeledBatch<'_>) -> f64 {
    let (_, probs) = forward(params, batch.features).unwrap();
    cross_entropy_loss(&probs, batch.labels).unwrap()
}

/// Worst relative error between the analytic gradient and central differences.
fn max_fd_error(spec: &NetworkSpec, seed: u64, n: usize) -> f64 {
    let params = init_params(spec, seed).unwrap();
    let (x, y) = random_batch(n, spec.input_dim, spec.output_dim, seed ^ 0xabc);
    let batch = LabeledBatch::new(x.view(), &y).unwrap();
    let analytic = gradients(&params, &batch).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (li, layer) in params.layers().iter().enumerate() {
        let count = layer.n_params();
        for k in 0..count {
            let mut plus = params.clone();
            let mut minus = params.clone();
            *plus.layers_mut()[li].values_mut().nth(k).unwrap() += h;
            *minus.layers_mut()[li].values_mut().nth(k).unwrap() -= h;
            let numeric = (loss_of(&plus, &batch) - loss_of(&minus, &batch)) / (2.0 * h);
            let a = *analytic.layers()[li].values().nth(k).unwrap();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn gradients_match_central_differences() {
    let spec = NetworkSpec::new(4, vec![3], 3).with_activation(Activation::Tanh);
    assert!(max_fd_error(&spec, 1, 8) < 1e-4);
    let spec = NetworkSpec::new(4, vec![3], 3);
    assert!(max_fd_error(&spec, 2, 8) < 1e-4);
}

#[test]
fn zero_softmax_regression_has_zero_bias_gradient_on_balanced_labels() {
    let spec = NetworkSpec::new(3, vec![], 3);
    let params = NetworkParams::from_layers(vec![Dense::zeros(3, 3)], Activation::Relu, true).unwrap();
    let (x, _) = random_batch(6, 3, 3, 4);
    let y = vec![0, 1, 2, 0, 1, 2];
    let g = gradients(&params, &LabeledBatch::new(x.view(), &y).unwrap()).unwrap();
    assert_eq!(g.layers()[0].bias.len(), spec.output_dim);
    for b in g.layers()[0].bias.iter() {
        assert!(b.abs() < 1e-15);
    }
}

#[test]
fn duplicated_samples_leave_mean_gradient_unchanged() {
    let params = init_params(&NetworkSpec::new(3, vec![4], 2), 5).unwrap();
    let (x, y) = random_batch(5, 3, 2, 6);
    let x2 = ndarray::concatenate![ndarray::Axis(0), x, x];
    let y2: Vec<usize> = y.iter().chain(&y).copied().collect();
    let g1 = gradients(&params, &LabeledBatch::new(x.view(), &y).unwrap()).unwrap();
    let g2 = gradients(&params, &LabeledBatch::new(x2.view(), &y2).unwrap()).unwrap();
    for (a, b) in g1.layers().iter().zip(g2.layers()) {
        for (u, v) in a.values().zip(b.values()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn init_is_seeded_and_shaped() {
    let spec = NetworkSpec::new(6, vec![5], 3);
    assert_eq!(init_params(&spec, 9).unwrap(), init_params(&spec, 9).unwrap());
    assert_ne!(init_params(&spec, 9).unwrap(), init_params(&spec, 10).unwrap());

    let p = init_params(&NetworkSpec::new(7, vec![], 4), 0).unwrap();
    assert_eq!(p.layers().len(), 1);
    assert_eq!(p.layers()[0].weight.dim(), (7, 4));
    assert!(p.layers()[0].bias.iter().all(|&b| b == 0.0));
    let bound = 1.0 / 7f64.sqrt();
    assert!(p.layers()[0].weight.iter().all(|w| w.abs() <= bound));
}

#[test]
fn forward_probabilities() {
    let zero = NetworkParams::from_layers(vec![Dense::zeros(2, 4)], Activation::Relu, true).unwrap();
    let x = array![[1.0, -3.0], [0.5, 2.0]];
    let (logits, probs) = forward(&zero, x.view()).unwrap();
    assert!(logits.iter().all(|&v| v == 0.0));
    assert!(probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));

    let p = init_params(&NetworkSpec::new(4, vec![6], 3), 3).unwrap();
    let (x, _) = random_batch(5, 4, 3, 3);
    let (_, probs) = forward(&p, x.view()).unwrap();
    for row in probs.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-9);
    }

    assert!(matches!(forward(&p, array![[1.0, 2.0]].view()), Err(Error::ShapeMismatch(_))));
}

#[test]
fn softmax_is_shift_invariant() {
    let logits = array![[1.0, 2.0, -0.5], [300.0, 301.0, 299.0]];
    let shifted = &logits + 1234.5;
    let a = softmax(&logits);
    let b = softmax(&shifted);
    for (u, v) in a.iter().zip(b.iter()) {
        assert!((u - v).abs() < 1e-12);
    }
    assert!(softmax(&array![[1000.0, 0.0]]).iter().all(|v| v.is_finite()));
}

#[test]
fn cross_entropy_examples() {
    let k = 5;
    let uniform = Array2::from_elem((3, k), 1.0 / k as f64);
    assert!((cross_entropy_loss(&uniform, &[0, 3, 4]).unwrap() - (k as f64).ln()).abs() < 1e-12);

    let perfect = array![[1.0, 0.0], [0.0, 1.0]];
    assert_eq!(cross_entropy_loss(&perfect, &[0, 1]).unwrap(), 0.0);

    let probs = array![[0.2, 0.5, 0.3], [0.1, 0.1, 0.8]];
    let expected = (-(0.5f64).ln() - (0.8f64).ln()) / 2.0;
    assert!((cross_entropy_loss(&probs, &[1, 2]).unwrap() - expected).abs() < 1e-12);

    // Floor keeps a zero probability finite.
    let hard_miss = cross_entropy_loss(&array![[1.0, 0.0]], &[1]).unwrap();
    assert!((hard_miss + 1e-12f64.ln()).abs() < 1e-9);

    assert!(matches!(cross_entropy_loss(&probs, &[1]), Err(Error::ShapeMismatch(_))));
}

#[test]
fn predict_ties_and_hand_weights() {
    let zero = NetworkParams::from_layers(vec![Dense::zeros(2, 3)], Activation::Relu, true).unwrap();
    assert_eq!(predict(&zero, array![[1.0, 2.0], [-1.0, 0.0]].view()).unwrap(), vec![0, 0]);

    // Class j scores feature j.
    let mut eye = Dense::zeros(3, 3);
    for i in 0..3 {
        eye.weight[(i, i)] = 1.0;
    }
    let p = NetworkParams::from_layers(vec![eye], Activation::Relu, true).unwrap();
    let x = array![[0.0, 0.0, 5.0], [2.0, 1.0, 0.0], [0.0, 3.0, -1.0]];
    assert_eq!(predict(&p, x.view()).unwrap(), vec![2, 0, 1]);

    let p = init_params(&NetworkSpec::new(4, vec![5], 3), 8).unwrap();
    let (x, _) = random_batch(20, 4, 3, 9);
    let (_, probs) = forward(&p, x.view()).unwrap();
    assert_eq!(predict(&p, x.view()).unwrap(), argmax_rows(&probs));
}

fn blobs_2d(seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::zeros((100, 2));
    let mut y = Vec::new();
    for i in 0..100 {
        let c = i % 2;
        let center = if c == 0 { -3.0 } else { 3.0 };
        x[(i, 0)] = center + rng.random_range(-1.0..1.0);
        x[(i, 1)] = rng.random_range(-1.0..1.0);
        y.push(c);
    }
    (x, y)
}

#[test]
fn fit_separable_blobs() {
    let (x, y) = blobs_2d(1);
    let batch = LabeledBatch::new(x.view(), &y).unwrap();
    let spec = NetworkSpec::new(2, vec![], 2);
    let cfg = TrainConfig { epochs: 50, base_lr: 0.05, batch_size: 10, seed: 3, ..TrainConfig::default() };
    let p = fit(&spec, &cfg, &batch, None).unwrap();
    assert!(accuracy(&predict(&p, x.view()).unwrap(), &y) >= 0.99);

    let again = fit(&spec, &cfg, &batch, None).unwrap();
    assert_eq!(p, again);

    let zero_epochs = TrainConfig { epochs: 0, ..cfg.clone() };
    assert_eq!(fit(&spec, &zero_epochs, &batch, None).unwrap(), init_params(&spec, cfg.seed).unwrap());
}

#[test]
fn fit_with_dev_selects_and_sgd_trains_mlp() {
    let (x, y) = blobs_2d(2);
    let (dx, dy) = blobs_2d(3);
    let train = LabeledBatch::new(x.view(), &y).unwrap();
    let dev = LabeledBatch::new(dx.view(), &dy).unwrap();
    let spec = NetworkSpec::new(2, vec![8], 2).with_activation(Activation::Tanh);
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        epochs: 20,
        base_lr: 0.1,
        batch_size: 16,
        schedule: ScheduleKind::PerIterationAfterWarmup,
        warmup_iterations: 50,
        ..TrainConfig::default()
    };
    let p = fit(&spec, &cfg, &train, Some(&dev)).unwrap();
    assert!(accuracy(&predict(&p, dx.view()).unwrap(), &dy) >= 0.99);
}

#[test]
fn divergence_is_reported() {
    let (x, y) = blobs_2d(4);
    let x = x * 1e200;
    let batch = LabeledBatch::new(x.view(), &y).unwrap();
    let cfg =
        TrainConfig { optimizer: OptimizerKind::Sgd, base_lr: 1e200, grad_clip: None, epochs: 3, ..Default::default() };
    let err = fit(&NetworkSpec::new(2, vec![4], 2), &cfg, &batch, None).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
}

#[test]
fn fit_rejects_bad_labels() {
    let (x, _) = blobs_2d(5);
    let y = vec![3usize; 100];
    let batch = LabeledBatch::new(x.view(), &y).unwrap();
    let err = fit(&NetworkSpec::new(2, vec![], 2), &TrainConfig::default(), &batch, None).unwrap_err();
    assert!(matches!(err, Error::Range { .. }));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn gradient_check_random_specs(
            input in 2usize..5,
            hidden in proptest::collection::vec(2usize..5, 0..3),
            out in 2usize..4,
            seed in any::<u64>(),
        ) {
            let spec = NetworkSpec::new(input, hidden, out).with_activation(Activation::Tanh);
            prop_assert!(max_fd_error(&spec, seed, 6) < 1e-4);
        }

        #[test]
        fn schedule_is_non_increasing(rho in 0.0f64..2.0, warm in 0usize..50, step in 1usize..20, t in 0usize..500) {
            for schedule in [ScheduleKind::PerEpoch, ScheduleKind::PerIterationAfterWarmup] {
                let cfg = TrainConfig { schedule, decay_rate: rho, warmup_iterations: warm, decay_step: step, ..Default::default() };
                prop_assert!(lr_at(&cfg, t + 1) <= lr_at(&cfg, t));
            }
        }

        #[test]
        fn clipped_norm_is_bounded(values in proptest::collection::vec(-100.0f64..100.0, 6), clip in 0.1f64..10.0) {
            let mut g = vec![Dense {
                weight: Array2::from_shape_vec((2, 2), values[..4].to_vec()).unwrap(),
                bias: ndarray::Array1::from(values[4..].to_vec()),
            }];
            let before = clip_global_norm(&mut g, clip);
            let after = optim::global_norm(&g);
            if before > clip {
                prop_assert!(after <= clip + 1e-9);
            } else {
                prop_assert!((after - before).abs() < 1e-12);
            }
        }
    }
}
