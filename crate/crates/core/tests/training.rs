use std::path::Path;

use camp::data::{generate_synthetic, Checkpoint, SyntheticData, SyntheticSpec};
use camp::evaluation::evaluate;
use camp::training::{run_batch, TrainConfig, Trainer};
use camp::ModelConfig;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        n_train: 64,
        n_val: 16,
        n_test: 16,
        raw_region_dim: 64,
        ..SyntheticSpec::default()
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        raw_dim: 64,
        d: 16,
        d_h: 8,
        max_words: 8,
        ..ModelConfig::desk()
    }
}

fn small_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        epochs,
        ..TrainConfig::desk()
    }
}

fn small_data() -> SyntheticData<f32> {
    generate_synthetic(&small_spec()).unwrap()
}

#[test]
fn full_runs_are_deterministic() {
    let data = small_data();
    let run = || {
        let mut t = Trainer::<f32>::new(small_model(), small_train(3)).unwrap();
        let fit = t.fit(&data.train, &data.val, |_| {}).unwrap();
        (fit.history, t.params().clone(), t.checkpoint().to_bytes())
    };
    let (h1, p1, b1) = run();
    let (h2, p2, b2) = run();
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
    assert_eq!(b1, b2);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = small_data();
    let mut full = Trainer::<f32>::new(small_model(), small_train(4)).unwrap();
    let whole = full.fit(&data.train, &data.val, |_| {}).unwrap().history;

    let mut first = Trainer::<f32>::new(small_model(), small_train(2)).unwrap();
    let head = first.fit(&data.train, &data.val, |_| {}).unwrap().history;
    let bytes = first.checkpoint().to_bytes();
    let ckpt = Checkpoint::<f32>::from_bytes(&bytes, Path::new("memory"), Some(&small_model())).unwrap();
    let mut second = Trainer::resume(ckpt, small_train(4)).unwrap();
    let tail = second.fit(&data.train, &data.val, |_| {}).unwrap().history;

    let joined: Vec<_> = head.into_iter().chain(tail).collect();
    assert_eq!(joined, whole);
    assert_eq!(second.params(), full.params());
}

#[test]
fn frozen_epoch_loss_equals_evaluation_loss() {
    let data = small_data();
    let cfg = TrainConfig {
        lr_phase1: 0.0,
        lr_phase2: 0.0,
        ..small_train(1)
    };
    let epoch_loss = || {
        let mut t = Trainer::<f32>::new(small_model(), cfg.clone()).unwrap();
        let batches = t.peek_batches(&data.train).unwrap();
        let eval: f64 = batches
            .iter()
            .map(|b| {
                run_batch(&data.train, b, t.params(), &t.model, &cfg.loss, false)
                    .unwrap()
                    .loss
            })
            .sum::<f64>()
            / batches.len() as f64;
        let before = t.params().clone();
        let stats = t.train_epoch(&data.train).unwrap();
        assert_eq!(t.params(), &before);
        (stats.loss, eval)
    };
    let (a, eval_a) = epoch_loss();
    let (b, _) = epoch_loss();
    assert_eq!(a.to_bits(), eval_a.to_bits());
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn loss_strictly_decreases_over_first_five_epochs() {
    let data = generate_synthetic::<f32>(&SyntheticSpec::default()).unwrap();
    let mut t = Trainer::<f32>::new(ModelConfig::desk(), TrainConfig::desk()).unwrap();
    let losses: Vec<f64> = (0..5).map(|_| t.train_epoch(&data.train).unwrap().loss).collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn patience_zero_stops_after_first_non_improving_epoch() {
    let data = small_data();
    let cfg = TrainConfig {
        lr_phase1: 0.0,
        lr_phase2: 0.0,
        early_stop_patience: Some(0),
        ..small_train(10)
    };
    let mut t = Trainer::<f32>::new(small_model(), cfg).unwrap();
    let fit = t.fit(&data.train, &data.val, |_| {}).unwrap();
    assert_eq!(fit.history.len(), 2);
    assert_eq!(fit.best.unwrap().train_state.unwrap().best_epoch, Some(0));
}

#[test]
fn best_checkpoint_dominates_history() {
    let data = small_data();
    let mut t = Trainer::<f32>::new(small_model(), small_train(4)).unwrap();
    let fit = t.fit(&data.train, &data.val, |_| {}).unwrap();
    let best = fit.best.unwrap();
    let rsum = best.best_val_rsum.unwrap();
    assert!(fit.history.iter().all(|s| s.val_rsum.unwrap() <= rsum));
    assert_eq!(evaluate(&data.val, &best.params, &best.config, 1).unwrap().rsum, rsum);
}

#[test]
fn forward_passes_scale_with_batches_times_b_squared() {
    let data = small_data();
    let mut t = Trainer::<f32>::new(small_model(), small_train(1)).unwrap();
    let batches = t.peek_batches(&data.train).unwrap();
    t.train_epoch(&data.train).unwrap();
    assert_eq!(t.forward_passes(), (batches.len() * 8 * 8) as u64);
}
