//! Library routines against independent reference implementations.

mod common;

use common::*;

fn assert_check(c: Check) {
    match c {
        Ok(detail) => println!("{detail}"),
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn connected_components_match_flood_fill() {
    assert_check(check_components(100));
}

#[test]
fn fill_holes_matches_border_flood_fill() {
    assert_check(check_fill_holes(100));
}

#[test]
fn ranking_metrics_match_brute_force() {
    assert_check(check_ranking_metrics(200));
}

#[test]
fn pooling_and_losses_match_direct_sums() {
    assert_check(check_pool_and_losses(200));
}

#[test]
fn oracle_sanity_on_hand_cases() {
    // the oracles themselves on values computed by hand
    assert_eq!(pairwise_auroc(&[0.9, 0.1, 0.5, 0.5], &[true, false, true, false]), 0.875);
    assert!((threshold_aupr(&[0.9, 0.8, 0.7], &[true, false, true]) - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    assert_eq!(threshold_fpr95(&[0.9, 0.8, 0.7], &[true, false, true]), 1.0);
    let cfg = raml_core::metric_embedding::CircleLossConfig::default();
    assert!((oracle_circle(&[0.5], &[0.25], &cfg) - 2f64.ln()).abs() < 1e-15);
}
