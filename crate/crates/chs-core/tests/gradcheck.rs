//! Finite-difference checks of the full model loss, and cross-head gradient
//! isolation. The heavy lifting lives in `common::fd`; the acceptance suite
//! runs the same harness with more sampled entries.

mod common;

#[test]
fn full_model_gradients_match_central_differences() {
    let summary = common::fd::check_full_model(0.25, 0.5, 3).unwrap_or_else(|e| panic!("{e}"));
    assert!(summary.entries_checked >= 2 * summary.tensors);
}

#[test]
fn cross_head_gradients_are_exactly_zero() {
    common::fd::check_cross_head_isolation().unwrap_or_else(|e| panic!("{e}"));
}
