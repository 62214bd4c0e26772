use naryecoc::data::{dev_split, synth_blobs};
use naryecoc::{
    evaluate_accuracy, generate_coding_matrix, predict_ensemble, train_ensemble, EnsembleModel, EnsembleOptions,
    NetworkSpec, SharingStrategy, TrainConfig,
};
use ndarray::s;

fn setup() -> (naryecoc::Dataset, naryecoc::Dataset, NetworkSpec, TrainConfig) {
    let all = synth_blobs(6, 40, 5, 1.0, 4).unwrap();
    let (train, test) = dev_split(&all, 0.25, 9).unwrap();
    let spec = NetworkSpec::new(5, vec![10, 8], 6);
    let cfg = TrainConfig { epochs: 4, base_lr: 0.01, batch_size: 16, seed: 21, ..TrainConfig::default() };
    (train, test, spec, cfg)
}

#[test]
fn no_share_prefix_equals_independent_retrain() {
    let (train, test, spec, cfg) = setup();
    let matrix = generate_coding_matrix(6, 9, 3, 5).unwrap();
    let opts = EnsembleOptions::default();
    let full = train_ensemble(&train, None, &matrix, SharingStrategy::no_share(), &spec, &cfg, &opts).unwrap();
    for k in [1, 4, 9] {
        let retrained =
            train_ensemble(&train, None, &matrix.prefix(k).unwrap(), SharingStrategy::no_share(), &spec, &cfg, &opts)
                .unwrap();
        let prefix = full.prefix(k).unwrap();
        assert_eq!(prefix.heads, retrained.heads, "k={k}");
        assert_eq!(
            predict_ensemble(&prefix, test.features().view()).unwrap(),
            predict_ensemble(&retrained, test.features().view()).unwrap()
        );
    }
}

#[test]
fn prediction_is_batch_size_invariant() {
    let (train, test, spec, cfg) = setup();
    let matrix = generate_coding_matrix(6, 7, 2, 1).unwrap();
    for strategy in [SharingStrategy::no_share(), SharingStrategy::partial_share(1), SharingStrategy::full_share()] {
        let model =
            train_ensemble(&train, Some(&test), &matrix, strategy, &spec, &cfg, &EnsembleOptions::default()).unwrap();
        let whole = predict_ensemble(&model, test.features().view()).unwrap();
        let one_by_one: Vec<usize> = (0..test.len())
            .flat_map(|i| predict_ensemble(&model, test.features().slice(s![i..i + 1, ..])).unwrap())
            .collect();
        assert_eq!(whole, one_by_one, "{strategy:?}");
        assert_eq!(whole, predict_ensemble(&model, test.features().view()).unwrap());
    }
}

#[test]
fn checkpoint_restores_predictions() {
    let (train, test, spec, cfg) = setup();
    let matrix = generate_coding_matrix(6, 5, 3, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (i, strategy) in [SharingStrategy::no_share(), SharingStrategy::partial_share(1), SharingStrategy::full_share()]
        .into_iter()
        .enumerate()
    {
        let model = train_ensemble(&train, None, &matrix, strategy, &spec, &cfg, &EnsembleOptions::default()).unwrap();
        let path = dir.path().join(format!("m{i}"));
        model.save(&path).unwrap();
        let back = EnsembleModel::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(
            predict_ensemble(&back, test.features().view()).unwrap(),
            predict_ensemble(&model, test.features().view()).unwrap()
        );
    }
}

#[test]
fn ensemble_learns_separable_blobs() {
    let all = synth_blobs(5, 60, 4, 0.3, 2).unwrap();
    let (train, test) = dev_split(&all, 0.3, 1).unwrap();
    let spec = NetworkSpec::new(4, vec![], 5);
    let cfg = TrainConfig { epochs: 20, base_lr: 0.01, batch_size: 16, ..TrainConfig::default() };
    let matrix = generate_coding_matrix(5, 15, 3, 8).unwrap();
    let model =
        train_ensemble(&train, None, &matrix, SharingStrategy::no_share(), &spec, &cfg, &EnsembleOptions::default())
            .unwrap();
    let acc = evaluate_accuracy(&predict_ensemble(&model, test.features().view()).unwrap(), test.labels()).unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn shared_training_is_thread_count_invariant() {
    let (train, test, spec, cfg) = setup();
    let matrix = generate_coding_matrix(6, 6, 3, 3).unwrap();
    let run = |threads: usize, strategy: SharingStrategy| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            train_ensemble(&train, Some(&test), &matrix, strategy, &spec, &cfg, &EnsembleOptions::default()).unwrap()
        })
    };
    for strategy in [SharingStrategy::no_share(), SharingStrategy::partial_share(1), SharingStrategy::full_share()] {
        assert_eq!(run(1, strategy), run(3, strategy), "{strategy:?}");
    }
}

#[test]
fn learner_codes_are_in_alphabet() {
    let (train, test, spec, cfg) = setup();
    let matrix = generate_coding_matrix(6, 8, 4, 6).unwrap();
    let model =
        train_ensemble(&train, None, &matrix, SharingStrategy::full_share(), &spec, &cfg, &EnsembleOptions::default())
            .unwrap();
    let codes = model.learner_codes(test.features().view()).unwrap();
    assert_eq!(codes.dim(), (test.len(), 8));
    assert!(codes.iter().all(|&c| (1..=4).contains(&c)));
}
