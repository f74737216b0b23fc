//! Macro one-vs-rest ROC AUC (midrank ties) and macro F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub macro_auc: f64,
    /// `None` for classes excluded from the macro mean.
    pub per_class: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

/// Rank-based AUC of one score column: positives vs. everything else.
fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let p = n_pos as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n_neg as f64))
}

/// `scores[i][c]` is the score of sample `i` for class `c`.
pub fn roc_auc(scores: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<AucReport> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "roc_auc: {} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|l| **l >= num_classes) {
        return Err(Error::Input(format!("roc_auc: label {l} outside 0..{num_classes}")));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != num_classes) {
        return Err(Error::Input(format!(
            "roc_auc: score row has {} entries, expected {num_classes}",
            row.len()
        )));
    }
    let mut warnings = Vec::new();
    let mut per_class = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let column: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let positive: Vec<bool> = labels.iter().map(|l| *l == c).collect();
        let auc = binary_auc(&column, &positive);
        if auc.is_none() {
            let why = if positive.iter().any(|p| *p) { "has no negatives" } else { "absent from labels" };
            warnings.push(format!("class {c} {why}; excluded from macro AUC"));
        }
        per_class.push(auc);
    }
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::Input("roc_auc: no class has both positives and negatives".into()));
    }
    Ok(AucReport {
        macro_auc: valid.iter().sum::<f64>() / valid.len() as f64,
        per_class,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub macro_f1: f64,
    /// `None` for classes absent from the labels.
    pub per_class: Vec<Option<f64>>,
}

pub fn f1(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<F1Report> {
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "f1: {} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Input("f1: no samples".into()));
    }
    if let Some(l) = labels.iter().chain(predictions).find(|l| **l >= num_classes) {
        return Err(Error::Input(format!("f1: class {l} outside 0..{num_classes}")));
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let support = labels.iter().filter(|l| **l == c).count();
            if support == 0 {
                return None;
            }
            let tp = predictions.iter().zip(labels).filter(|(p, l)| **p == c && **l == c).count();
            let predicted = predictions.iter().filter(|p| **p == c).count();
            let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
            let recall = tp as f64 / support as f64;
            Some(if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            })
        })
        .collect();
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    Ok(F1Report {
        macro_f1: valid.iter().sum::<f64>() / valid.len() as f64,
        per_class,
    })
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `None` when no class has both positives and negatives.
    pub auc: Option<f64>,
    pub f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub n_samples: usize,
    pub warnings: Vec<String>,
}

/// AUC over probabilities, F1 and accuracy over argmax predictions.
pub fn evaluate_scores(probabilities: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<MetricReport> {
    let preds: Vec<usize> = probabilities.iter().map(|r| argmax(r)).collect();
    let f = f1(&preds, labels, num_classes)?;
    let (auc, auc_per_class, warnings) = match roc_auc(probabilities, labels, num_classes) {
        Ok(r) => (Some(r.macro_auc), r.per_class, r.warnings),
        Err(Error::Input(msg)) => (None, vec![None; num_classes], vec![msg]),
        Err(e) => return Err(e),
    };
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(MetricReport {
        auc,
        f1: f.macro_f1,
        accuracy: correct as f64 / labels.len() as f64,
        per_class: (0..num_classes)
            .map(|c| ClassMetrics {
                class: c,
                auc: auc_per_class[c],
                f1: f.per_class[c],
            })
            .collect(),
        n_samples: labels.len(),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binary(scores: &[f64]) -> Vec<Vec<f64>> {
        scores.iter().map(|s| vec![1.0 - s, *s]).collect()
    }

    #[test]
    fn auc_fixed_cases() {
        let perfect = roc_auc(&binary(&[0.1, 0.2, 0.8, 0.9]), &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(perfect.macro_auc, 1.0);
        let flat = roc_auc(&binary(&[0.5; 4]), &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(flat.macro_auc, 0.5);
        let r = roc_auc(&binary(&[0.1, 0.4, 0.35, 0.8]), &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(r.per_class[1], Some(0.75));
    }

    #[test]
    fn absent_class_is_excluded_with_warning() {
        let scores = vec![vec![0.7, 0.2, 0.1], vec![0.2, 0.7, 0.1], vec![0.6, 0.3, 0.1]];
        let r = roc_auc(&scores, &[0, 1, 0], 3).unwrap();
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(r.macro_auc, 1.0);
        assert!(roc_auc(&scores, &[0, 0, 0], 3).is_err());
    }

    #[test]
    fn f1_fixed_cases() {
        assert_eq!(f1(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap().macro_f1, 1.0);
        assert_eq!(f1(&[1, 1, 0, 0], &[0, 0, 1, 1], 2).unwrap().macro_f1, 0.0);
        let r = f1(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((r.per_class[0].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.per_class[1].unwrap() - 0.8).abs() < 1e-15);
        assert!((r.macro_f1 - 11.0 / 15.0).abs() < 1e-15);
        assert!(matches!(f1(&[0], &[0, 1], 2), Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn auc_is_rank_invariant_and_complementary(
            raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..30),
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let labels: Vec<usize> = raw.iter().map(|r| r.1 as usize).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[0] < w[1]));

            let col = |s: &[f64]| s.iter().map(|v| vec![0.0, *v]).collect::<Vec<_>>();
            let base = roc_auc(&col(&scores), &labels, 2).unwrap().per_class[1].unwrap();
            let cubed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            let mono = roc_auc(&col(&cubed), &labels, 2).unwrap().per_class[1].unwrap();
            prop_assert_eq!(base, mono);
            let flipped: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
            let comp = roc_auc(&col(&flipped), &labels, 2).unwrap().per_class[1].unwrap();
            prop_assert!((base + comp - 1.0).abs() < 1e-12);
        }
    }
}
