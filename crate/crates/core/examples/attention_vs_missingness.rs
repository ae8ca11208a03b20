//! How much attention the other variables pay to one variable as more of it
//! goes missing, on a briefly trained model.
//!
//! `cargo run --example attention_vs_missingness`

use t1::data::{gen_synthetic, Generator, SyntheticSpec};
use t1::eval::attention_vs_missingness;
use t1::model::{BlockGroup, ModelConfig, T1Model};
use t1::training::{train, TrainConfig};

fn main() -> t1::Result<()> {
    let windows = gen_synthetic(&SyntheticSpec {
        num_vars: 4,
        seq_len: 48,
        num_windows: 96,
        generator: Generator::CorrelatedSines {
            freqs: vec![2.0, 3.0, 4.0, 5.0],
            phase_coupling: 0.8,
            noise_sd: 0.1,
        },
        seed: 3,
    })?;
    let model = T1Model::new(ModelConfig {
        channels: 16,
        groups: vec![
            BlockGroup {
                num_blocks: 1,
                large_kernel: 35,
                small_kernel: 5,
                downsample_after: true,
            },
            BlockGroup {
                num_blocks: 1,
                large_kernel: 15,
                small_kernel: 5,
                downsample_after: false,
            },
        ],
        num_vars: 4,
        seq_len: 48,
        ..ModelConfig::default()
    })?;
    let cfg = TrainConfig {
        max_epochs: 5,
        patience: 5,
        ..TrainConfig::default()
    };
    let outcome = train(&model, &windows[..64], &windows[64..80], &cfg)?;

    let ratios = [0.0, 0.2, 0.4, 0.6, 0.8];
    let curve = attention_vs_missingness(&model, &outcome.params, &windows[80..], 0, &ratios, 0.4, 7)?;
    println!("layer  ratio  weight onto var 0 from others");
    for p in curve {
        println!("{:>5}  {:>5.1}  {:.4}", p.layer, p.ratio, p.mean_weight);
    }
    Ok(())
}
