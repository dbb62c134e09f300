//! Fixtures shared by the criterion benches.

use dpace_core::drafter::{DrafterConfig, DrafterParams};
use dpace_core::numerics::Matrix;
use dpace_core::specdec::{sample_target_model, TargetModel};
use dpace_core::{ConfidenceBlock, TargetTokens};

/// Deterministic pseudo-random values in `[0, 1)` without an RNG dependency.
fn unit(i: usize) -> f64 {
    let x = (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    (x >> 11) as f64 / (1u64 << 53) as f64
}

pub fn confidences(block: usize) -> ConfidenceBlock {
    ConfidenceBlock::new((0..block).map(|i| 0.2 + 0.79 * unit(i)).collect()).expect("values in [0, 1]")
}

pub fn logit_block(block: usize, vocab: usize) -> (Matrix, TargetTokens) {
    let data = (0..block * vocab).map(|i| 4.0 * unit(i) - 2.0).collect();
    let logits = Matrix::from_vec(block, vocab, data).expect("shape matches");
    let targets = TargetTokens::new((0..block).map(|j| (j * 7 + 3) % vocab).collect());
    (logits, targets)
}

pub fn drafter(vocab: usize, block: usize) -> DrafterParams {
    let config = DrafterConfig {
        vocab,
        context: 4,
        embed: 16,
        hidden: 128,
        block,
    };
    DrafterParams::init(&config, 0).expect("valid drafter config")
}

pub fn target(vocab: usize, order: usize) -> TargetModel {
    sample_target_model(vocab, order, 0.5, 0).expect("table fits")
}
