mod common;

use common::{full_loss_check, op_cases, GRAD_TOLERANCE};

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..5 {
        for case in op_cases(seed) {
            let r = case.check();
            assert!(r.max_rel_error < GRAD_TOLERANCE, "{} seed {seed}: {r:?}", case.name);
        }
    }
}

#[test]
fn composed_loss_matches_finite_differences() {
    for seed in 0..3 {
        let r = full_loss_check(seed);
        assert!(r.coords_checked > 1000);
        assert!(r.max_rel_error < GRAD_TOLERANCE, "seed {seed}: {r:?}");
    }
}
