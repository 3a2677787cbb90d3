mod common;

use common::*;
use ssae::Matrix;

#[test]
fn assignment_matches_brute_force() {
    let c = assignment_suite(100);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let c = gradient_suite(20);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn mcc_is_permutation_and_scale_invariant() {
    let c = mcc_invariance_suite(20);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn decoder_norms_and_multiplier_hold_along_a_trace() {
    let c = training_trace_suite();
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn brute_force_oracle_sanity() {
    let s = Matrix::from_row_slice(2, 3, &[1.0, 5.0, 0.0, 4.0, 6.0, 0.0]);
    assert_eq!(brute_force_best(&s), 9.0);
    assert_eq!(brute_force_best(&s.transpose()), 9.0);
}

#[test]
fn finite_difference_oracle_sanity() {
    // With an identity model the lagrangian at lambda = 0 is zero and flat in b_e.
    let mut p = ssae::model::SsaeParams::zeros(3, 3);
    p.w_e = Matrix::identity(3, 3);
    p.w_d = Matrix::identity(3, 3);
    let x = random_matrix(5, 3, 1);
    assert!(naive_lagrangian(&p, &x, 0.0, false).abs() < 1e-15);
    let g = finite_difference_grad(&p, &x, 0.0, false, 1e-6);
    assert!(g.iter().all(|v| v.abs() < 1e-6));
}
