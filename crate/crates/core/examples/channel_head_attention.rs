//! Attention across variables with one head per group of channels, and the
//! fact that its cost does not depend on the group width.
//!
//! `cargo run --example channel_head_attention`

use t1::eval::count_flops_and_params;
use t1::model::ModelConfig;
use t1::tensor::{chead_attention, Tensor};

fn main() -> t1::Result<()> {
    let (m, c, l) = (4, 8, 12);
    let q = Tensor::from_fn([m, c, l], |i| (i as f64 * 0.37).sin());
    let k = Tensor::from_fn([m, c, l], |i| (i as f64 * 0.11).cos());
    let v = Tensor::from_fn([m, c, l], |i| i as f64 / 100.0);

    for group in [1, 2, 8] {
        let out = chead_attention(&q, &k, &v, group)?;
        let heads = out.weights.shape()[0];
        let first = &out.weights.data()[..m];
        println!("{group} channel(s) per head: {heads} heads, head 0 row 0 = {first:.3?}");
    }

    for group in [1, 8, 16, 32] {
        let cfg = ModelConfig {
            channels_per_head: group,
            ..ModelConfig::default()
        };
        let report = count_flops_and_params(&cfg);
        println!("g={group:>2}: attention FLOPs {}", report.attention_flops());
    }
    Ok(())
}
