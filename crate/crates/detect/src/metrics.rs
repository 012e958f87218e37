//! Classification metrics and the balanced bootstrap evaluation protocol.
//!
//! Scores follow the crate-wide convention that larger values mean more
//! out-of-distribution, and OOD is always the positive class. The bootstrap
//! keeps the OOD test set fixed and redraws ID subsets of matching size, so
//! heavily imbalanced ID pools do not wash out the positive class.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use driftwood_core::rng::stream_indexed;
use driftwood_core::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.tp + self.fp + self.fn_ + self.tn)
    }

    pub fn f1(&self) -> f64 {
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Counts with OOD positive and the decision rule `score > tau`.
pub fn confusion(id_scores: &[f64], ood_scores: &[f64], tau: f64) -> ConfusionCounts {
    let tp = ood_scores.iter().filter(|&&s| s > tau).count();
    let fp = id_scores.iter().filter(|&&s| s > tau).count();
    ConfusionCounts {
        tp,
        fp,
        fn_: ood_scores.len() - tp,
        tn: id_scores.len() - fp,
    }
}

/// Rank statistic P(S_ood > S_id), ties counted half. Exact pairwise
/// evaluation; the sets involved here stay desk-sized.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(CoreError::validation("AUROC needs both classes"));
    }
    let mut wins = 0.0;
    for &o in ood_scores {
        for &i in id_scores {
            if o > i {
                wins += 1.0;
            } else if o == i {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (id_scores.len() * ood_scores.len()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub auroc: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
}

impl MetricSet {
    fn to_array(self) -> [f64; 6] {
        [self.auroc, self.accuracy, self.precision, self.recall, self.f1, self.specificity]
    }

    fn from_array(a: [f64; 6]) -> MetricSet {
        MetricSet {
            auroc: a[0],
            accuracy: a[1],
            precision: a[2],
            recall: a[3],
            f1: a[4],
            specificity: a[5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub b: usize,
    pub tau: f64,
    /// set when the ID pool was smaller than the OOD set and draws had to
    /// sample with replacement
    pub with_replacement: bool,
    pub draws: Vec<MetricSet>,
    pub mean: MetricSet,
    pub std: MetricSet,
}

fn metric_set(id_scores: &[f64], ood_scores: &[f64], tau: f64) -> Result<MetricSet> {
    let counts = confusion(id_scores, ood_scores, tau);
    Ok(MetricSet {
        auroc: auroc(id_scores, ood_scores)?,
        accuracy: counts.accuracy(),
        precision: counts.precision(),
        recall: counts.recall(),
        f1: counts.f1(),
        specificity: counts.specificity(),
    })
}

/// Balanced bootstrap: the OOD scores stay fixed, each draw pairs them with
/// an equally sized ID subset sampled without replacement (with replacement,
/// flagged, when the ID pool is too small). Reported std is the sample
/// standard deviation across draws.
pub fn bootstrap_evaluate(
    id_scores: &[f64],
    ood_scores: &[f64],
    tau: f64,
    b: usize,
    seed: u64,
) -> Result<EvalReport> {
    if ood_scores.len() < 2 {
        return Err(CoreError::validation("bootstrap needs at least 2 OOD scores"));
    }
    if id_scores.is_empty() {
        return Err(CoreError::validation("bootstrap needs ID scores"));
    }
    if b == 0 {
        return Err(CoreError::validation("bootstrap needs at least one draw"));
    }
    let take = ood_scores.len();
    let with_replacement = id_scores.len() < take;
    let mut draws = Vec::with_capacity(b);
    for draw in 0..b {
        let mut rng = stream_indexed(seed, "bootstrap", draw as u64);
        let subset: Vec<f64> = if with_replacement {
            (0..take)
                .map(|_| id_scores[rng.gen_range(0..id_scores.len())])
                .collect()
        } else {
            let mut idx: Vec<usize> = (0..id_scores.len()).collect();
            idx.shuffle(&mut rng);
            idx[..take].iter().map(|&i| id_scores[i]).collect()
        };
        draws.push(metric_set(&subset, ood_scores, tau)?);
    }
    let mut mean = [0.0; 6];
    for d in &draws {
        for (m, v) in mean.iter_mut().zip(d.to_array()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= b as f64;
    }
    let mut var = [0.0; 6];
    for d in &draws {
        for ((s, v), m) in var.iter_mut().zip(d.to_array()).zip(mean) {
            *s += (v - m).powi(2);
        }
    }
    let denom = if b > 1 { (b - 1) as f64 } else { 1.0 };
    let std = var.map(|v| (v / denom).sqrt());
    Ok(EvalReport {
        b,
        tau,
        with_replacement,
        draws,
        mean: MetricSet::from_array(mean),
        std: MetricSet::from_array(std),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use driftwood_core::rng::stream;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn hand_confusion_matrix() {
        // two OOD above threshold, one below; one ID above, two below
        let ood = [1.0, 2.0, -1.0];
        let id = [-2.0, -1.5, 0.5];
        let c = confusion(&id, &ood, 0.0);
        assert_eq!(c, ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 2 });
        assert_relative_eq!(c.precision(), 2.0 / 3.0);
        assert_relative_eq!(c.recall(), 2.0 / 3.0);
        assert_relative_eq!(c.f1(), 2.0 / 3.0);
        assert_relative_eq!(c.specificity(), 2.0 / 3.0);
        assert_relative_eq!(c.accuracy(), 4.0 / 6.0);
    }

    #[test]
    fn zero_denominators_give_zero() {
        let c = ConfusionCounts { tp: 0, fp: 0, fn_: 3, tn: 3 };
        assert_eq!(c.precision(), 0.0);
        assert_eq!(c.f1(), 0.0);
    }

    #[test]
    fn auroc_hand_values() {
        assert_eq!(auroc(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 0.0);
        // one exact tie out of four pairs
        assert_eq!(auroc(&[1.0, 2.0], &[2.0, 3.0]).unwrap(), 0.875);
        assert_eq!(auroc(&[1.0], &[1.0]).unwrap(), 0.5);
        assert!(auroc(&[], &[1.0]).is_err());
    }

    #[test]
    fn perfectly_separated_bootstrap() {
        let id: Vec<f64> = (0..50).map(|i| -1.0 - i as f64 * 0.01).collect();
        let ood: Vec<f64> = (0..10).map(|i| 1.0 + i as f64 * 0.01).collect();
        let report = bootstrap_evaluate(&id, &ood, 0.0, 25, 9).unwrap();
        assert_eq!(report.mean.auroc, 1.0);
        assert_eq!(report.std.auroc, 0.0);
        assert_eq!(report.mean.f1, 1.0);
        assert!(!report.with_replacement);
    }

    #[test]
    fn small_id_pool_flags_replacement() {
        let id = [0.0, 0.1];
        let ood = [1.0, 2.0, 3.0];
        let report = bootstrap_evaluate(&id, &ood, 0.5, 10, 1).unwrap();
        assert!(report.with_replacement);
        assert_eq!(report.draws.len(), 10);
    }

    #[test]
    fn bootstrap_is_seed_deterministic() {
        let mut rng = stream(10, "boot");
        let id: Vec<f64> = (0..40).map(|_| StandardNormal.sample(&mut rng)).collect();
        let ood: Vec<f64> = (0..12).map(|_| StandardNormal.sample(&mut rng)).collect();
        let a = bootstrap_evaluate(&id, &ood, 0.0, 30, 42).unwrap();
        let b = bootstrap_evaluate(&id, &ood, 0.0, 30, 42).unwrap();
        assert_eq!(a, b);
        let c = bootstrap_evaluate(&id, &ood, 0.0, 30, 43).unwrap();
        assert_ne!(a.draws, c.draws);
    }

    proptest! {
        #[test]
        fn auroc_flips_under_negation(
            id in proptest::collection::vec(-10.0f64..10.0, 1..12),
            ood in proptest::collection::vec(-10.0f64..10.0, 1..12),
        ) {
            let pos = auroc(&id, &ood).unwrap();
            let neg_id: Vec<f64> = id.iter().map(|v| -v).collect();
            let neg_ood: Vec<f64> = ood.iter().map(|v| -v).collect();
            let neg = auroc(&neg_id, &neg_ood).unwrap();
            prop_assert!((pos - (1.0 - neg)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&pos));
        }
    }
}
