//! Exact rational ranking-metric oracles shared by the metric tests and the
//! acceptance run.

use btm_core::rng::rng_from;
use num_rational::Ratio;
use rand::Rng;

pub type Q = Ratio<i64>;

/// favorable pairs + half the tied pairs, over all pairs.
pub fn pairwise_auroc(scores: &[f64], labels: &[f64]) -> Q {
    let mut twice_favorable = 0i64;
    let mut pairs = 0i64;
    for (i, &yi) in labels.iter().enumerate() {
        if yi != 1.0 {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj != 0.0 {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                twice_favorable += 2;
            } else if scores[i] == scores[j] {
                twice_favorable += 1;
            }
        }
    }
    Q::new(twice_favorable, 2 * pairs)
}

/// For each distinct threshold `s` (descending), predict positive iff
/// `score >= s`; add precision times the recall increment.
pub fn threshold_auprc(scores: &[f64], labels: &[f64]) -> Q {
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count() as i64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut total = Q::from_integer(0);
    let mut prev_tp = 0i64;
    for s in thresholds {
        let (mut tp, mut fp) = (0i64, 0i64);
        for (x, y) in scores.iter().zip(labels) {
            if *x >= s {
                if *y == 1.0 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        total += Q::new(tp, tp + fp) * Q::new(tp - prev_tp, n_pos);
        prev_tp = tp;
    }
    total
}

pub fn to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

/// A random instance with both classes and frequent ties.
pub fn instance(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = rng_from(seed);
    let n = rng.random_range(2..=20);
    let levels = rng.random_range(1..=n);
    let mut labels: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.4))).collect();
    labels[0] = 1.0;
    labels[1] = 0.0;
    let scores = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
    (scores, labels)
}
