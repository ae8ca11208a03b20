//! Writes a CSV with gaps, trains a small model on it and fills the gaps.
//!
//! `cargo run --example impute_csv`

use t1::cli::{impute_series, prepare_windows, DataConfig, DataSource, RunConfig};
use t1::data::{load_csv, SplitFractions};
use t1::model::{BlockGroup, ModelConfig, T1Model};
use t1::training::{train, TrainConfig};

fn main() -> t1::Result<()> {
    let dir = std::env::temp_dir().join("t1-impute-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("sensors.csv");

    let mut text = String::from("time,a,b,c\n");
    for t in 0..600 {
        let v = |phase: f64| (t as f64 * 0.2 + phase).sin();
        let b = if t % 17 == 5 { String::new() } else { format!("{:.4}", v(0.5)) };
        text.push_str(&format!("{t},{:.4},{b},{:.4}\n", v(0.0), v(1.0)));
    }
    std::fs::write(&path, text)?;

    let mut cfg = RunConfig {
        seed: 0,
        output_dir: dir.clone(),
        model: ModelConfig {
            channels: 8,
            seq_len: 24,
            groups: vec![
                BlockGroup {
                    num_blocks: 1,
                    large_kernel: 17,
                    small_kernel: 5,
                    downsample_after: true,
                },
                BlockGroup {
                    num_blocks: 1,
                    large_kernel: 7,
                    small_kernel: 5,
                    downsample_after: false,
                },
            ],
            ..ModelConfig::default()
        },
        train: TrainConfig {
            max_epochs: 3,
            patience: 3,
            ..TrainConfig::default()
        },
        data: DataConfig {
            source: DataSource::Csv {
                path: path.clone(),
                time_column: Some("time".into()),
                value_columns: None,
            },
            split: SplitFractions::default(),
            strides: None,
        },
        scenarios: Vec::new(),
        analysis: Default::default(),
    };
    let windows = prepare_windows(&mut cfg)?;
    let model = T1Model::new(cfg.model.clone())?;
    let outcome = train(&model, &windows.train, &windows.valid, &cfg.train)?;

    let series = load_csv(&path, Some("time"), None)?;
    let filled = impute_series(&model, &outcome.params, &series)?;
    let n = series.len();
    for t in [5, 22, 39] {
        println!("b[{t}] was missing, filled with {:.4}", filled.data()[n + t]);
    }
    Ok(())
}
