//! Draws point, block and training masks and prints their missing rates.
//!
//! `cargo run --example missing_patterns`

use t1::masking::{compound_mask, gen_block_mask, gen_point_mask, gen_training_mask, BlockParams, MaskPair};

fn missing_rate(mask: &t1::tensor::Tensor) -> f64 {
    mask.data().iter().filter(|&&v| v == 0.0).count() as f64 / mask.len() as f64
}

fn main() -> t1::Result<()> {
    let shape = [8, 7, 96];

    for ratio in [0.1, 0.5, 0.9] {
        let omega = gen_point_mask(&shape, ratio, 1)?;
        println!("point {ratio:.1}: {:.3} missing", missing_rate(&omega));
    }

    let block = gen_block_mask(&shape, &BlockParams::default(), 2)?;
    println!("block defaults: {:.3} missing", missing_rate(&block));

    // 80% natural missingness plus 70% extra on what is left
    let natural = gen_point_mask(&shape, 0.8, 3)?;
    let (omega, targets) = compound_mask(&natural, 0.7, 4)?;
    println!(
        "compound 0.8 + 0.7: {:.3} missing in total, {} scored entries",
        missing_rate(&omega),
        targets.sum()
    );

    let psi = gen_training_mask(&natural, 0.4, 5)?.psi;
    let pair = MaskPair::new(natural, psi)?;
    println!(
        "training mask: model sees {} entries, loss scores {}",
        pair.effective().sum(),
        pair.supervision().sum()
    );
    Ok(())
}
