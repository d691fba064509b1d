//! Analytic gradients against central finite differences at float64.

mod common;

use common::*;

#[test]
fn memory_regularizer_gradients_match() {
    for seed in 0..5 {
        let r = reg_gradcheck(seed, 1.0);
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
        assert!(r.checked > 0);
    }
}

#[test]
fn memory_regularizer_gradients_match_with_active_and_inactive_hinges() {
    for margin in [0.0, 0.2, 5.0] {
        let r = reg_gradcheck(11, margin);
        assert!(r.max_rel_error < 1e-4, "margin {margin}: {r:?}");
    }
}

#[test]
fn invariant_risk_gradients_match() {
    for seed in 0..5 {
        for lambda1 in [0.0, 0.3, 2.0] {
            let r = inv_gradcheck(seed, lambda1);
            assert!(r.max_rel_error < 1e-4, "seed {seed} λ {lambda1}: {r:?}");
            assert_eq!(r.skipped_kinks, 0);
        }
    }
}

#[test]
fn semantic_adjacency_gradients_match() {
    for seed in 0..5 {
        let r = semantic_gradcheck(seed);
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn full_objective_gradients_match() {
    for seed in 0..3 {
        let r = objective_gradcheck(seed);
        assert!(r.max_rel_error < 1e-3, "seed {seed}: {r:?}");
        assert!(r.checked > 100, "{r:?}");
    }
}

#[test]
fn objective_is_the_weighted_component_sum() {
    let inst = objective_instance(4);
    let ([total, task, inv, reg], _) = inst.evaluate(inst.model.params(), false);
    assert!(reg > 0.0 && inv > 0.0);
    assert!((total - (task + inv + inst.loss.lambda2 * reg)).abs() < 1e-12);
}
