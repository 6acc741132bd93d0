//! Gradient correctness: central finite differences (step 1e-3) against the
//! f64 reference, relative error < 1e-3, for every op and the full model.

mod common;

#[test]
fn every_op_passes_finite_difference_check() {
    if let Err(msg) = common::gradcheck::check_op_gradients() {
        panic!("{msg}");
    }
}

#[test]
fn full_two_layer_model_passes_finite_difference_check() {
    if let Err(msg) = common::gradcheck::check_model_gradients() {
        panic!("{msg}");
    }
}
