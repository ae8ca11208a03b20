//! Per-component FLOP and parameter table for the default configuration.
//!
//! `cargo run --example flop_accounting -- [num_vars]`

use t1::eval::count_flops_and_params;
use t1::model::{ModelConfig, Upsampler};

fn main() {
    let num_vars = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(7);
    for upsampler in [Upsampler::PixelShuffle, Upsampler::Linear] {
        let cfg = ModelConfig {
            num_vars,
            upsampler,
            ..ModelConfig::default()
        };
        let report = count_flops_and_params(&cfg);
        println!("{upsampler:?}, M={num_vars}");
        for row in &report.rows {
            println!("  {:<18} {:>14} FLOPs {:>9} params", row.component, row.flops, row.params);
        }
        println!("  {:<18} {:>14} FLOPs {:>9} params", "total", report.total_flops, report.total_params);
    }
}
