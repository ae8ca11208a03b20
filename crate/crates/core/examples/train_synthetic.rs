//! Trains a reduced model on correlated sines and compares it with the
//! mean and linear-interpolation imputers at 50% point missingness.
//!
//! `cargo run --example train_synthetic -- [epochs]`

use t1::data::{gen_synthetic, Generator, SyntheticSpec};
use t1::eval::{evaluate_baseline, evaluate_scenario, BaselineKind};
use t1::masking::MaskSpec;
use t1::model::{BlockGroup, ModelConfig, T1Model};
use t1::training::{train, TrainConfig};

fn main() -> t1::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(8);

    let windows = gen_synthetic(&SyntheticSpec {
        num_vars: 8,
        seq_len: 96,
        num_windows: 384,
        generator: Generator::CorrelatedSines {
            freqs: (0..8).map(|m| 3.0 + m as f64).collect(),
            phase_coupling: 0.5,
            noise_sd: 0.1,
        },
        seed: 1,
    })?;
    let (train_set, rest) = windows.split_at(256);
    let (valid, test) = rest.split_at(64);

    let model = T1Model::new(ModelConfig {
        channels: 32,
        groups: vec![
            BlockGroup {
                num_blocks: 1,
                large_kernel: 71,
                small_kernel: 5,
                downsample_after: true,
            },
            BlockGroup {
                num_blocks: 1,
                large_kernel: 31,
                small_kernel: 5,
                downsample_after: false,
            },
        ],
        num_vars: 8,
        seq_len: 96,
        ..ModelConfig::default()
    })?;
    println!("{} parameters", model.num_params());

    let outcome = train(
        &model,
        train_set,
        valid,
        &TrainConfig {
            max_epochs: epochs,
            patience: epochs,
            seed: 1,
            ..TrainConfig::default()
        },
    )?;
    println!("best validation loss {:.4} at epoch {}", outcome.best_valid_loss, outcome.best_epoch);

    let spec = MaskSpec::point(0.5, 1);
    let ours = evaluate_scenario(&model, &outcome.params, test, &spec)?;
    println!("model   mse {:.4} mae {:.4}", ours.mse, ours.mae);
    for kind in [BaselineKind::Mean, BaselineKind::LinearInterp] {
        let r = evaluate_baseline(test, &spec, kind)?;
        println!("{kind:?} mse {:.4} mae {:.4}", r.mse, r.mae);
    }
    Ok(())
}
