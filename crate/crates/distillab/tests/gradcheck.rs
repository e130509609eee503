//! Finite-difference gradient checks for the autodiff engine: every
//! primitive (including broadcast and vector-promotion variants) and three
//! randomly composed multi-layer scalar graphs.

mod common;

#[test]
fn every_primitive_matches_finite_differences() {
    let failures = common::check_all_primitives();
    assert!(failures.is_empty(), "gradient check failures:\n{}", failures.join("\n"));
}

#[test]
fn composed_graphs_match_finite_differences() {
    let failures = common::check_composed_graphs();
    assert!(failures.is_empty(), "gradient check failures:\n{}", failures.join("\n"));
}
