use rand::{Rng, SeedableRng};
use soundssl::models::{Classifier, EncoderConfig};
use soundssl::tensor::Tensor;
use soundssl::train::{finetune, predict, LabeledSet, OptimizerConfig, TrainError, TrainRunConfig};

fn encoder() -> EncoderConfig {
    EncoderConfig::from_json(
        r#"{"input":[1,8,8],"blocks":[{"filters":4,"kernel":[3,3],"batchnorm":true,"pool":[2,2]},{"filters":6,"kernel":[3,3]}]}"#,
    )
    .unwrap()
}

/// Class c lights up quadrant c of an 8×8 image.
fn quadrants(n: usize, seed: u64) -> LabeledSet {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 4;
        for p in 0..64 {
            let q = (p / 8 >= 4) as usize * 2 + (p % 8 >= 4) as usize;
            data.push(if q == c { 0.7 } else { 0.2 } + rng.gen_range(-0.15f32..0.15));
        }
        labels.push(c);
    }
    LabeledSet::new(Tensor::new(&[n, 1, 8, 8], data).unwrap(), labels).unwrap()
}

fn run(epochs: usize, seed: u64) -> TrainRunConfig {
    TrainRunConfig {
        epochs,
        batch_size: 8,
        seed,
    }
}

#[test]
fn separable_toy_is_learned() {
    let model = Classifier::new(encoder(), 4).unwrap();
    let train = quadrants(48, 1);
    let val = quadrants(16, 2);
    let r = finetune(&model, model.init(3).unwrap(), &train, &val, &[0, 1, 2, 3], &OptimizerConfig::adam(1e-2), &run(25, 3)).unwrap();
    assert!(r.curve.last().unwrap().train_accuracy >= 0.99, "{:?}", r.curve.last());
    assert!(r.best_val_balanced_accuracy >= 0.99);
    let preds = predict(&model, &r.best, &quadrants(20, 9).images, 7).unwrap();
    let hits = preds.iter().zip(quadrants(20, 9).labels).filter(|(p, y)| **p == *y).count();
    assert!(hits >= 19);
}

#[test]
fn best_epoch_is_earliest_maximum() {
    let model = Classifier::new(encoder(), 4).unwrap();
    let r = finetune(&model, model.init(4).unwrap(), &quadrants(32, 5), &quadrants(8, 6), &[0, 1, 2, 3], &OptimizerConfig::adam(1e-2), &run(12, 4)).unwrap();
    let max = r.curve.iter().map(|e| e.val_balanced_accuracy).fold(f64::MIN, f64::max);
    let first = r.curve.iter().find(|e| e.val_balanced_accuracy == max).unwrap();
    assert_eq!(r.best_epoch, first.epoch);
    assert_eq!(r.best_val_balanced_accuracy, max);
}

#[test]
fn seeded_runs_are_bit_identical() {
    let model = Classifier::new(encoder(), 4).unwrap();
    let go = || {
        finetune(&model, model.init(7).unwrap(), &quadrants(24, 1), &quadrants(8, 2), &[0, 1, 2, 3], &OptimizerConfig::default(), &run(3, 11))
            .unwrap()
            .best
            .to_checkpoint()
            .to_bytes()
    };
    assert_eq!(go(), go());
}

#[test]
fn vanishing_learning_rate_leaves_weights_alone() {
    let model = Classifier::new(encoder(), 4).unwrap();
    let init = model.init(8).unwrap();
    let opt = OptimizerConfig::Sgd {
        learning_rate: 1e-30,
        momentum: 0.0,
    };
    let r = finetune(&model, init.clone(), &quadrants(16, 1), &quadrants(8, 2), &[0, 1, 2, 3], &opt, &run(2, 1)).unwrap();
    for (name, w) in &init.params {
        for (a, b) in r.best.params[name].data().iter().zip(w.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-6), "{name}: {a} vs {b}");
        }
    }
}

#[test]
fn rejects_degenerate_runs() {
    let model = Classifier::new(encoder(), 4).unwrap();
    let init = model.init(1).unwrap();
    let (t, v) = (quadrants(8, 1), quadrants(4, 2));
    let bad = OptimizerConfig::Sgd {
        learning_rate: 0.0,
        momentum: 0.0,
    };
    assert!(matches!(finetune(&model, init.clone(), &t, &v, &[0], &bad, &run(1, 1)), Err(TrainError::Config(_))));
    assert!(matches!(
        finetune(&model, init, &t, &v, &[0], &OptimizerConfig::default(), &run(0, 1)),
        Err(TrainError::Config(_))
    ));
}

#[test]
fn exploding_learning_rate_is_reported_with_location() {
    let model = Classifier::new(encoder(), 4).unwrap();
    let opt = OptimizerConfig::Sgd {
        learning_rate: 1e30,
        momentum: 0.0,
    };
    match finetune(&model, model.init(2).unwrap(), &quadrants(32, 1), &quadrants(8, 2), &[0, 1, 2, 3], &opt, &run(5, 1)) {
        Err(TrainError::NonFiniteLoss { epoch, .. }) => assert!(epoch >= 1),
        Err(TrainError::NonFiniteGradient(_)) => {}
        other => panic!("expected a nonfinite failure, got {:?}", other.map(|r| r.best_epoch)),
    }
}
