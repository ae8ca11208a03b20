//! Finite-difference check of every parameter gradient of a small network.
//!
//! `cargo run --example gradient_check`

use t1::autodiff::{grad_check, GradCheckOptions};
use t1::masking::{gen_point_mask, gen_training_mask, MaskPair};
use t1::model::{scale_kernels, BlockGroup, ModelConfig, T1Model};
use t1::tensor::Tensor;

fn main() -> t1::Result<()> {
    let base = ModelConfig {
        channels: 8,
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
        num_vars: 3,
        ..ModelConfig::default()
    };
    let (cfg, _) = scale_kernels(&base, 16)?;
    let model = T1Model::new(cfg)?;
    let params = model.init_params(0);

    let x = Tensor::from_fn([3, 16], |i| (i as f64 * 0.4).sin());
    let omega = gen_point_mask(&[1, 3, 16], 0.1, 1)?;
    let psi = gen_training_mask(&omega, 0.4, 2)?.psi;
    let pair = MaskPair::new(omega.reshape([3, 16])?, psi.reshape([3, 16])?)?;
    let (seen, scored) = (pair.effective(), pair.supervision());
    let weight = 1.0 / scored.sum();

    let report = grad_check(
        &params,
        |tape, p| {
            let out = model.forward_sample(tape, p, &x, &seen)?;
            tape.masked_sq_err(out.x_hat, &x, &scored, weight)
        },
        GradCheckOptions {
            step: 1e-4,
            ..GradCheckOptions::default()
        },
    )?;
    for t in &report.tensors {
        println!("{:<22} {:>5} elements  max rel error {:.2e}", t.name, t.checked, t.max_rel_error);
    }
    println!("passed: {}", report.passed());
    Ok(())
}
