//! Finite-difference checks of every tape primitive and of the whole
//! encode, fuse and objective graph.

mod common;

use common::checks;

const SEEDS: u64 = 20;

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, _, _) in checks::primitives() {
        checks::gradcheck_primitive(name, SEEDS);
    }
}

#[test]
fn end_to_end_objective_matches_finite_differences() {
    for seed in 0..SEEDS {
        checks::gradcheck_end_to_end(seed);
    }
}
