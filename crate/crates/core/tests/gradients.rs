//! Central finite-difference checks of the hand-written backward passes.

mod common;

#[test]
fn mim_backward_matches_finite_differences() {
    println!("{}", common::mim_gradients().unwrap());
}

#[test]
fn var_backward_matches_finite_differences() {
    println!("{}", common::var_gradients().unwrap());
}

#[test]
fn flow_backward_matches_finite_differences() {
    println!("{}", common::flow_gradients().unwrap());
}
