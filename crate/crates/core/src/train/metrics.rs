//! Ranking metrics and the binary cross-entropy objective.

use std::collections::BTreeMap;

use crate::error::{dim_err, Error, Result};
use crate::graph::bce_value;

/// Mann-Whitney AUC; tied scores contribute ½ per positive/negative pair.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return dim_err(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative labels".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("scores contain NaN".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of (1-based, tie-averaged) ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Per-group AUC averaged with equal weight per valid group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Uauc {
    pub value: f64,
    pub valid_groups: usize,
    /// Groups lacking one of the two classes.
    pub skipped_groups: usize,
}

pub fn uauc(scores: &[f64], labels: &[f64], groups: &[u32]) -> Result<Uauc> {
    if scores.len() != labels.len() || scores.len() != groups.len() {
        return dim_err("scores, labels and groups must have equal lengths");
    }
    let mut by_group: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((&s, &y), &g) in scores.iter().zip(labels).zip(groups) {
        let e = by_group.entry(g).or_default();
        e.0.push(s);
        e.1.push(y);
    }
    let (mut sum, mut valid, mut skipped) = (0.0, 0, 0);
    for (s, y) in by_group.values() {
        match auc(s, y) {
            Ok(a) => {
                sum += a;
                valid += 1;
            }
            Err(Error::UndefinedMetric(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if valid == 0 {
        return Err(Error::UndefinedMetric("no group contains both classes".into()));
    }
    Ok(Uauc { value: sum / valid as f64, valid_groups: valid, skipped_groups: skipped })
}

/// Mean of `-[y log σ(z) + (1 - y) log(1 - σ(z))]`, evaluated as
/// `max(z, 0) + ln(1 + e^{-|z|}) - y·z`.
pub fn bce_loss(logits: &[f64], labels: &[f64]) -> Result<f64> {
    if logits.len() != labels.len() {
        return dim_err(format!("{} logits for {} labels", logits.len(), labels.len()));
    }
    if logits.is_empty() {
        return dim_err("bce of an empty batch");
    }
    Ok(bce_value(logits, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair_oracle(scores: &[f64], labels: &[f64]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1.0 && labels[j] == 0.0 {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_edge_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1.0, 1.0]), Err(Error::UndefinedMetric(_))));
        assert!(auc(&[0.1], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn six_with_one_tie() {
        let s = [0.9, 0.4, 0.4, 0.2, 0.7, 0.1];
        let y = [1.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        // positives 0.9, 0.4, 0.1 vs negatives 0.4, 0.2, 0.7:
        // 0.9 beats 3; 0.4 ties 1, beats 1; 0.1 beats 0 → 4.5 / 9
        assert_eq!(auc(&s, &y).unwrap(), 0.5);
        assert_eq!(auc(&s, &y).unwrap(), pair_oracle(&s, &y));
    }

    #[test]
    fn uauc_skips_single_class_groups() {
        let s = [0.9, 0.1, 0.2, 0.8, 0.5, 0.6];
        let y = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let g = [0, 0, 1, 1, 2, 2];
        let u = uauc(&s, &y, &g).unwrap();
        assert_eq!(u, Uauc { value: 0.5, valid_groups: 2, skipped_groups: 1 });
        assert!(uauc(&[0.1, 0.2], &[1.0, 1.0], &[0, 1]).is_err());
    }

    #[test]
    fn bce_cases() {
        assert!((bce_loss(&[0.0], &[1.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(bce_loss(&[50.0], &[1.0]).unwrap() < 1e-20);
        let z: [f64; 4] = [0.3, -2.0, 4.0, -0.7];
        let y = [1.0, 0.0, 0.0, 1.0];
        let direct: f64 = z
            .iter()
            .zip(&y)
            .map(|(&z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 4.0;
        assert!((bce_loss(&z, &y).unwrap() - direct).abs() <= 1e-12);
        assert!(bce_loss(&z, &y[..3]).is_err());
    }

    proptest! {
        #[test]
        fn auc_matches_pairs_and_is_monotone_invariant(
            data in prop::collection::vec((0u8..6, any::<bool>()), 2..40)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64).collect();
            let labels: Vec<f64> = data.iter().map(|(_, y)| if *y { 1.0 } else { 0.0 }).collect();
            prop_assume!(labels.contains(&1.0) && labels.contains(&0.0));
            let a = auc(&scores, &labels).unwrap();
            prop_assert!((a - pair_oracle(&scores, &labels)).abs() <= 1e-12);
            let warped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() - 3.0).collect();
            prop_assert_eq!(auc(&warped, &labels).unwrap(), a);
        }
    }
}
