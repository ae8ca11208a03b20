//! Training loop behaviour on small synthetic problems.

use t1::data::{gen_synthetic, Generator, SeriesBatch, SyntheticSpec, Window};
use t1::eval::{evaluate_baseline, BaselineKind};
use t1::masking::{gen_training_mask, MaskSpec};
use t1::model::{BlockGroup, ModelConfig, T1Model};
use t1::training::{batch_gradients, train, Adam, TrainConfig};

fn windows(num_vars: usize, n: usize, noise_sd: f64, seed: u64) -> Vec<Window> {
    windows_of_len(num_vars, 16, n, noise_sd, seed)
}

fn windows_of_len(num_vars: usize, seq_len: usize, n: usize, noise_sd: f64, seed: u64) -> Vec<Window> {
    gen_synthetic(&SyntheticSpec {
        num_vars,
        seq_len,
        num_windows: n,
        generator: Generator::CorrelatedSines {
            freqs: (0..num_vars).map(|m| 1.0 + m as f64).collect(),
            phase_coupling: 0.5,
            noise_sd,
        },
        seed,
    })
    .unwrap()
}

fn model(num_vars: usize) -> T1Model {
    model_with_channels(num_vars, 8)
}

fn model_with_channels(num_vars: usize, channels: usize) -> T1Model {
    T1Model::new(ModelConfig {
        channels,
        groups: vec![
            BlockGroup {
                num_blocks: 1,
                large_kernel: 7,
                small_kernel: 3,
                downsample_after: true,
            },
            BlockGroup {
                num_blocks: 1,
                large_kernel: 5,
                small_kernel: 3,
                downsample_after: false,
            },
        ],
        seq_len: 16,
        num_vars,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn cfg(lr: f64, max_epochs: usize, patience: usize) -> TrainConfig {
    TrainConfig {
        lr,
        batch_size: 4,
        max_epochs,
        patience,
        seed: 7,
        ..TrainConfig::default()
    }
}

/// Psi is redrawn every batch, so the loss keeps sampling noise; 500 epochs
/// of one batch each end near 5e-2, well short of exact memorisation.
#[test]
fn fits_four_windows() {
    let m = model_with_channels(2, 16);
    let data = windows(2, 4, 0.0, 3);
    let out = train(&m, &data, &[], &cfg(3e-3, 500, 500)).unwrap();
    assert!(out.aborted.is_none());
    assert_eq!(out.history.len(), 500);
    let mean = |r: &[t1::training::EpochRecord]| r.iter().map(|e| e.train_loss).sum::<f64>() / r.len() as f64;
    let (head, tail) = (mean(&out.history[..10]), mean(&out.history[450..]));
    assert!(tail < head / 5.0, "first 10 epochs {head}, last 50 {tail}");
    assert!(out.best_valid_loss < 5e-2, "best {}", out.best_valid_loss);
}

#[test]
fn zero_patience_stops_after_first_non_improving_epoch() {
    let m = model(2);
    let data = windows(2, 8, 0.1, 1);
    let out = train(&m, &data[..6], &data[6..], &cfg(0.0, 10, 0)).unwrap();
    assert_eq!(out.history.len(), 2);
    assert_eq!(out.best_epoch, 1);
    assert!(out.stopped_early);
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let m = model(2);
    let data = windows(2, 8, 0.1, 1);
    let out = train(&m, &data[..6], &data[6..], &cfg(0.0, 3, 3)).unwrap();
    let init = m.init_params(7);
    for (id, name, entry) in out.params.iter() {
        assert_eq!(&entry.value, &init.entry(id).value, "{name}");
    }
    let valid: Vec<f64> = out.history.iter().map(|r| r.valid_loss).collect();
    assert!(valid.iter().all(|v| v.to_bits() == valid[0].to_bits()));
}

#[test]
fn best_parameters_match_recorded_minimum() {
    let m = model(3);
    let data = windows(3, 24, 0.1, 2);
    let out = train(&m, &data[..16], &data[16..], &cfg(3e-3, 8, 8)).unwrap();
    let min = out.history.iter().map(|r| r.valid_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_valid_loss, min);
    assert_eq!(out.history[out.best_epoch - 1].valid_loss, min);
}

#[test]
fn training_is_deterministic() {
    let m = model(3);
    let data = windows(3, 12, 0.1, 5);
    let a = train(&m, &data[..8], &data[8..], &cfg(1e-3, 3, 3)).unwrap();
    let b = train(&m, &data[..8], &data[8..], &cfg(1e-3, 3, 3)).unwrap();
    assert_eq!(a.history, b.history);
    for ((_, _, x), (_, _, y)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(x.value, y.value);
    }
}

#[test]
fn tiny_adam_step_descends() {
    let m = model(3);
    for seed in 0..10 {
        let data = windows(3, 4, 0.1, 100 + seed);
        let batch = SeriesBatch::from_windows(&data).unwrap();
        let psi = gen_training_mask(&batch.omega, 0.4, seed).unwrap().psi;
        let batch = batch.with_psi(psi).unwrap();
        let mut params = m.init_params(seed);
        let before = batch_gradients(&m, &params, &batch).unwrap();
        params.accumulate(&before.grads);
        let mut adam = Adam::new(&TrainConfig {
            lr: 1e-6,
            ..TrainConfig::default()
        });
        adam.step(&mut params).unwrap();
        let after = batch_gradients(&m, &params, &batch).unwrap();
        assert!(after.loss.value < before.loss.value, "seed {seed}: {} -> {}", before.loss.value, after.loss.value);
    }
}

#[test]
fn mean_imputer_on_standardized_data_scores_about_one() {
    let data: Vec<Window> = windows_of_len(4, 96, 64, 0.3, 9)
        .into_iter()
        .map(|mut w| {
            let t = w.seq_len();
            for row in w.x.data_mut().chunks_mut(t) {
                let mu = row.iter().sum::<f64>() / t as f64;
                let sd = (row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / t as f64).sqrt();
                row.iter_mut().for_each(|v| *v = (*v - mu) / sd);
            }
            w
        })
        .collect();
    let report = evaluate_baseline(&data, &MaskSpec::point(0.5, 3), BaselineKind::Mean).unwrap();
    assert!((report.mse - 1.0).abs() < 0.1, "mse {}", report.mse);
    assert_eq!(report.windows_without_targets, 0);
}
