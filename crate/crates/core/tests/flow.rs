//! Flow-matching identities and toy conditional decoder behaviour.

mod common;

use maskcodec::flowlab::*;

#[test]
fn path_and_field_agree() {
    println!("{}", common::path_identities().unwrap());
}

#[test]
fn guidance_identities_are_exact() {
    common::guidance_identities().unwrap();
}

#[test]
fn euler_is_first_order() {
    println!("{}", common::euler_order().unwrap());
}

#[test]
fn decoder_learns_a_single_point() {
    println!("{}", common::toy_decoder_point().unwrap());
}

#[test]
fn sampling_is_seeded() {
    let f = GaussianTarget { mu: vec![0.0, 1.0], s: 0.5, sigma_min: 0.0 };
    let a = ode_sample(&f, &[], None, 20, 1.0, 9).unwrap();
    assert_eq!(a, ode_sample(&f, &[], None, 20, 1.0, 9).unwrap());
    assert_ne!(a, ode_sample(&f, &[], None, 20, 1.0, 10).unwrap());
}
