use mscnn_core::gradsuite::{run_suite, unified_checks, COMPOSITE_TOL, LAYER_TOL};
use std::time::Instant;

#[test]
fn every_gradient_check_passes() {
    let t = Instant::now();
    let results = run_suite(7).unwrap();
    for r in &results {
        println!("{:40} err {:.3e} tol {:.0e} probes {}", r.name, r.max_error, r.tolerance, r.probes);
    }
    assert_eq!(results.len(), 19);
    for r in &results {
        assert!(r.passed(), "{} error {:e}", r.name, r.max_error);
    }
    assert!(t.elapsed().as_secs() < 60, "suite took {:?}", t.elapsed());
}

#[test]
fn tolerances_are_pinned() {
    assert_eq!(LAYER_TOL, 1e-4);
    assert_eq!(COMPOSITE_TOL, 1e-3);
}

#[test]
fn unified_probe_is_stable_across_seeds() {
    for seed in [1, 2] {
        for r in unified_checks(seed, 2).unwrap() {
            assert!(r.passed(), "seed {seed}: {} error {:e}", r.name, r.max_error);
            assert!(r.probes > 0);
        }
    }
}
