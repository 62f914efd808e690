//! Finite-difference checks for model modules and losses in f64.

mod support;

use support::{grad_decoder_block, grad_encoder_block, grad_losses, grad_mff, SEEDS, TOL};

fn assert_within(r: (String, f64)) {
    assert!(r.1 < TOL, "{}: max relative error {:.3e}", r.0, r.1);
}

#[test]
fn encoder_block_gradients() {
    assert_within(grad_encoder_block(SEEDS));
}

#[test]
fn fusion_gradients() {
    assert_within(grad_mff(SEEDS));
}

#[test]
fn decoder_block_gradients() {
    assert_within(grad_decoder_block(SEEDS));
}

#[test]
fn loss_gradients() {
    for r in grad_losses(SEEDS) {
        assert_within(r);
    }
}
