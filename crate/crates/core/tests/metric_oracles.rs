//! Ranking metrics against exact rational oracles: AUROC by counting every
//! positive/negative pair, AUPRC by enumerating every distinct threshold.

mod common;

use btm_core::eval::{auprc, auroc};
use btm_core::rng::rng_from;
use common::{instance, pairwise_auroc, threshold_auprc, to_f64, Q};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn worked_examples() {
    let s = [0.1, 0.4, 0.35, 0.8];
    let y = [0.0, 0.0, 1.0, 1.0];
    assert_eq!(pairwise_auroc(&s, &y), Q::new(3, 4));
    assert_eq!(auroc(&s, &y).unwrap(), 0.75);

    let s = [0.9, 0.8, 0.7];
    let y = [1.0, 0.0, 1.0];
    // (1/2)(1 + 2/3)
    assert_eq!(threshold_auprc(&s, &y), Q::new(5, 6));
    assert_eq!(auprc(&s, &y).unwrap(), to_f64(Q::new(5, 6)));
}

#[test]
fn thousand_random_instances_match_oracles() {
    for seed in 0..1000 {
        let (s, y) = instance(seed);
        assert_eq!(auroc(&s, &y).unwrap(), to_f64(pairwise_auroc(&s, &y)), "auroc seed {seed}");
        assert_eq!(auprc(&s, &y).unwrap(), to_f64(threshold_auprc(&s, &y)), "auprc seed {seed}");
    }
}

#[test]
fn random_scores_auprc_near_prevalence() {
    let mut rng = rng_from(99);
    for prevalence in [0.05, 0.2, 0.5] {
        let n = 10_000;
        let y: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(prevalence))).collect();
        let s: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let ap = auprc(&s, &y).unwrap();
        assert!((ap - prevalence).abs() <= 0.05, "{prevalence}: {ap}");
    }
}

#[test]
fn undefined_metrics_are_errors() {
    assert!(auroc(&[0.1, 0.2], &[1.0, 1.0]).is_err());
    assert!(auprc(&[0.1, 0.2], &[0.0, 0.0]).is_err());
    assert!(auroc(&[0.1], &[1.0, 0.0]).is_err());
}

proptest! {
    #[test]
    fn metrics_are_invariant_to_monotone_maps(seed in any::<u64>()) {
        let (s, y) = instance(seed);
        let mapped: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 2.0).collect();
        prop_assert_eq!(auroc(&s, &y).unwrap(), auroc(&mapped, &y).unwrap());
        prop_assert_eq!(auprc(&s, &y).unwrap(), auprc(&mapped, &y).unwrap());
    }

    #[test]
    fn flipped_scores_complement_auroc(seed in any::<u64>()) {
        let (s, y) = instance(seed);
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let sum = pairwise_auroc(&s, &y) + pairwise_auroc(&neg, &y);
        prop_assert_eq!(sum, Q::from_integer(1));
        prop_assert!((auroc(&s, &y).unwrap() + auroc(&neg, &y).unwrap() - 1.0).abs() < 1e-15);
    }
}
