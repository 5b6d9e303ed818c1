//! Ranking metrics for binary scores.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

fn counts(labels: &[f64]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    (pos, labels.len() - pos)
}

/// Area under the ROC curve in its Mann-Whitney form,
/// `P(s_pos > s_neg) + 0.5 P(s_pos = s_neg)`, via midranks.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_dim(scores.len(), labels.len())?;
    let (n_pos, n_neg) = counts(labels);
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("auroc needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of (1-based) midranks of the positives. Midranks are half-integers,
    // so this sum is exact for any realistic n.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let group_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count();
        rank_sum += midrank * group_pos as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    let u = rank_sum - np * (np + 1.0) / 2.0;
    Ok(u / (np * n_neg as f64))
}

/// Average precision: the sum over score thresholds (descending, ties grouped)
/// of precision at the threshold times the recall gained there.
///
/// The sum is accumulated as an exact fraction and rounded once while its
/// terms fit; very large inputs fall back to floating-point accumulation.
pub fn auprc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_dim(scores.len(), labels.len())?;
    let (n_pos, _) = counts(labels);
    if n_pos == 0 {
        return Err(Error::UndefinedMetric("auprc needs at least one positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut exact = Some(Fraction::ZERO);
    let mut acc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count();
        tp += group_pos;
        fp += j + 1 - i - group_pos;
        if group_pos > 0 {
            acc += group_pos as f64 * tp as f64 / (tp + fp) as f64;
            exact = exact.and_then(|f| f.add((group_pos * tp) as u128, (tp + fp) as u128));
        }
        i = j + 1;
    }
    if let Some(v) = exact.and_then(|f| f.div_to_f64(n_pos as u128)) {
        return Ok(v);
    }
    Ok(acc / n_pos as f64)
}

/// Non-negative fraction kept in lowest terms, for sums that should round
/// only once.
#[derive(Clone, Copy)]
struct Fraction {
    num: u128,
    den: u128,
}

impl Fraction {
    const ZERO: Fraction = Fraction { num: 0, den: 1 };

    /// `self + num / den`, or `None` on overflow.
    fn add(self, num: u128, den: u128) -> Option<Fraction> {
        let g = gcd(self.den, den);
        let lcm = (self.den / g).checked_mul(den)?;
        let a = self.num.checked_mul(lcm / self.den)?;
        let b = num.checked_mul(lcm / den)?;
        let n = a.checked_add(b)?;
        let g = gcd(n, lcm);
        Some(Fraction { num: n / g, den: lcm / g })
    }

    /// `self / k` rounded once, when both parts are exact in an `f64`.
    fn div_to_f64(self, k: u128) -> Option<f64> {
        const EXACT: u128 = 1 << 53;
        let den = self.den.checked_mul(k)?;
        let g = gcd(self.num, den);
        let (n, d) = (self.num / g, den / g);
        (n <= EXACT && d <= EXACT).then(|| n as f64 / d as f64)
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub auprc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub seed: u64,
    /// Training on the evaluated data produced non-finite values; the metrics
    /// are NaN and the report is excluded from aggregates.
    pub diverged: bool,
}

impl MetricReport {
    pub fn from_scores(scores: &[f64], labels: &[f64], seed: u64) -> Result<Self> {
        let (n_pos, n_neg) = counts(labels);
        Ok(MetricReport {
            auroc: auroc(scores, labels)?,
            auprc: auprc(scores, labels)?,
            n_pos,
            n_neg,
            seed,
            diverged: false,
        })
    }

    pub fn diverged(seed: u64, labels: &[f64]) -> Self {
        let (n_pos, n_neg) = counts(labels);
        MetricReport {
            auroc: f64::NAN,
            auprc: f64::NAN,
            n_pos,
            n_neg,
            seed,
            diverged: true,
        }
    }
}

/// Mean and sample standard deviation of the non-diverged reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub auprc_mean: f64,
    pub auprc_std: f64,
    pub runs: usize,
    pub diverged: usize,
}

pub fn summarize(reports: &[MetricReport]) -> MetricSummary {
    let ok: Vec<&MetricReport> = reports.iter().filter(|r| !r.diverged).collect();
    let stats = |f: fn(&MetricReport) -> f64| -> (f64, f64) {
        if ok.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let n = ok.len() as f64;
        let mean = ok.iter().map(|r| f(r)).sum::<f64>() / n;
        if ok.len() < 2 {
            return (mean, 0.0);
        }
        let var = ok.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var.sqrt())
    };
    let (auroc_mean, auroc_std) = stats(|r| r.auroc);
    let (auprc_mean, auprc_std) = stats(|r| r.auprc);
    MetricSummary {
        auroc_mean,
        auroc_std,
        auprc_mean,
        auprc_std,
        runs: ok.len(),
        diverged: reports.len() - ok.len(),
    }
}
