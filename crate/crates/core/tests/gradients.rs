//! Library gradients of every training loss against central differences of
//! an independent evaluation.

mod common;

use common::*;

#[test]
fn losses_match_finite_differences() {
    let instances = usable_instances(11, 100);
    for kind in ALL_LOSSES {
        let mut worst: f64 = 0.0;
        for (i, inst) in instances.iter().enumerate() {
            let c = grad_check(kind, inst);
            assert!(c.value_err < 1e-10, "{kind:?} #{i}: value differs by {}", c.value_err);
            assert!(c.max_rel_err <= 1e-5, "{kind:?} #{i}: relative error {}", c.max_rel_err);
            worst = worst.max(c.max_rel_err);
        }
        eprintln!("{kind:?}: worst relative error {worst:.2e}");
    }
}

#[test]
fn diversity_loss_sends_nothing_to_the_bank() {
    for inst in usable_instances(12, 40) {
        assert_eq!(grad_check(LossKind::Diversity, &inst).bank_grad_max_abs, 0.0);
    }
}

#[test]
fn well_conditioned_instances_are_common() {
    // The filter must not silently reduce coverage to a handful of shapes.
    let kept = (0..200).map(|i| random_instance(13, i)).filter(well_conditioned).count();
    assert!(kept >= 100, "only {kept}/200 instances usable");
}
