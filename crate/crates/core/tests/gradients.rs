//! Central finite-difference checks for every backward kernel and for the
//! whole model.

mod common;

use common::gradcheck::*;
use prism::model::{backward, forward, init_params, Batch, NoHooks, Numerics};

#[test]
fn matmul_backward_matches_finite_differences() {
    assert!(worst_matmul() < OP_TOLERANCE);
}

#[test]
fn layernorm_backward_matches_finite_differences() {
    assert!(worst_layernorm() < OP_TOLERANCE);
}

#[test]
fn gelu_backward_matches_finite_differences() {
    assert!(worst_gelu() < OP_TOLERANCE);
}

#[test]
fn softmax_backward_matches_finite_differences() {
    assert!(worst_softmax() < OP_TOLERANCE);
}

#[test]
fn embedding_backward_matches_finite_differences() {
    assert!(worst_embedding() < OP_TOLERANCE);
}

#[test]
fn cross_entropy_backward_matches_finite_differences() {
    assert!(worst_cross_entropy() < OP_TOLERANCE);
}

#[test]
fn end_to_end_model_gradient_matches_finite_differences() {
    let (overall, per_tensor) = worst_end_to_end();
    assert!(overall < MODEL_TOLERANCE, "{overall}");
    assert!(per_tensor < MODEL_TOLERANCE, "{per_tensor}");
}

#[test]
fn loss_scale_multiplies_gradients_exactly() {
    let cfg = tiny_model(1);
    let params = init_params(&cfg).unwrap();
    let batch = Batch::new(vec![1, 2, 3, 4, 5], vec![2, 3, 4, 5, 6], 5).unwrap();
    let (_, cache) = forward(&params, &cfg, &batch, Numerics::WIDE, &mut NoHooks).unwrap();
    let g1 = backward(&params, &cfg, &cache, 1.0, Numerics::WIDE, &mut NoHooks).unwrap();
    let g8 = backward(&params, &cfg, &cache, 8.0, Numerics::WIDE, &mut NoHooks).unwrap();
    for (a, b) in g1.flatten().iter().zip(g8.flatten()) {
        assert_eq!(a * 8.0, b);
    }
}
