use openworld::opencon::{em_consistency_checks, em_train, synthetic_benchmark, TrainConfig};

#[test]
fn novel_loss_lifts_novel_accuracy() {
    for seed in 0..5 {
        let data = synthetic_benchmark(seed).unwrap();
        let cfg = TrainConfig::standard(seed);
        let full = em_train(&data, &cfg).unwrap();
        let mut ablated_cfg = cfg.clone();
        ablated_cfg.lambda_n = 0.0;
        let ablated = em_train(&data, &ablated_cfg).unwrap();
        let f = full.history.last().unwrap();
        let a = ablated.history.last().unwrap();
        eprintln!("seed {seed}: full {:.4} ablated {:.4} known {:.4}", f.novel_acc, a.novel_acc, f.known_acc);
        assert!(f.novel_acc >= 0.9);
        assert!(a.novel_acc < f.novel_acc);
    }
}

#[test]
fn training_is_deterministic() {
    let data = synthetic_benchmark(11).unwrap();
    let mut cfg = TrainConfig::standard(11);
    cfg.epochs = 3;
    let a = em_train(&data, &cfg).unwrap();
    let b = em_train(&data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.history.len(), 3);
    assert!(a.history.iter().enumerate().all(|(i, r)| r.epoch == i));
}

#[test]
fn em_view_checks() {
    let data = synthetic_benchmark(2).unwrap();
    let mut cfg = TrainConfig::standard(2);
    cfg.epochs = 5;
    let state = em_train(&data, &cfg).unwrap();
    let r = em_consistency_checks(&state, &data, &cfg, 100).unwrap();
    assert!(r.prototype_optimal);
    assert!(r.decomposition_error <= 1e-10);
    assert_eq!(r.batches, 100);
    assert!(r.same_class_rate > 0.0 && r.same_class_rate <= 1.0);
}
