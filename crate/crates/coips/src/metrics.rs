//! Classification metrics (accuracy, precision, recall, F1, confusion
//! matrix, one-vs-rest ROC/AUC) and segmentation overlap metrics (Dice,
//! Jaccard, precision, recall).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// K x K counts; rows are true classes, columns predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let trace: u64 = (0..self.k).map(|i| self.get(i, i)).sum();
        trace as f64 / self.total() as f64
    }

    /// True-class support per class (row sums).
    pub fn support(&self, class: usize) -> u64 {
        (0..self.k).map(|j| self.get(class, j)).sum()
    }
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if y_true.is_empty() {
        return Err(Error::UndefinedMetric(
            "confusion matrix of an empty sample set".into(),
        ));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape(format!(
            "{} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut counts = vec![0u64; k * k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= k || p >= k {
            return Err(Error::Contract(format!("label ({t},{p}) out of range [0,{k})")));
        }
        counts[t * k + p] += 1;
    }
    Ok(ConfusionMatrix { k, counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when the class was never predicted and precision defaulted to 0.
    pub precision_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
}

pub fn classification_report(cm: &ConfusionMatrix) -> Result<ClassificationReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::UndefinedMetric("empty confusion matrix".into()));
    }
    let k = cm.k;
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.get(c, c);
        let col: u64 = (0..k).map(|i| cm.get(i, c)).sum();
        let row = cm.support(c);
        let undefined = col == 0;
        let precision = if undefined { 0.0 } else { tp as f64 / col as f64 };
        let recall = if row == 0 { 0.0 } else { tp as f64 / row as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support: row,
            precision_undefined: undefined,
        });
    }
    let kf = k as f64;
    let tf = total as f64;
    let wavg = |f: &dyn Fn(&ClassMetrics) -> f64| {
        per_class
            .iter()
            .map(|m| f(m) * m.support as f64)
            .sum::<f64>()
            / tf
    };
    Ok(ClassificationReport {
        accuracy: cm.accuracy(),
        macro_precision: per_class.iter().map(|m| m.precision).sum::<f64>() / kf,
        macro_recall: per_class.iter().map(|m| m.recall).sum::<f64>() / kf,
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / kf,
        weighted_precision: wavg(&|m| m.precision),
        weighted_recall: wavg(&|m| m.recall),
        weighted_f1: wavg(&|m| m.f1),
        per_class,
    })
}

/// One-vs-rest AUC for class `k` from per-sample score vectors, computed
/// with midranks so ties contribute 1/2.
pub fn roc_auc(scores: &[Vec<f64>], y_true: &[usize], class: usize) -> Result<f64> {
    if scores.len() != y_true.len() {
        return Err(Error::Shape("scores and labels differ in length".into()));
    }
    let s: Vec<f64> = scores
        .iter()
        .map(|row| {
            row.get(class)
                .copied()
                .ok_or_else(|| Error::Shape(format!("score row lacks class {class}")))
        })
        .collect::<Result<_>>()?;
    let pos: Vec<f64> = s
        .iter()
        .zip(y_true)
        .filter(|(_, &t)| t == class)
        .map(|(&v, _)| v)
        .collect();
    let n_pos = pos.len();
    let n_neg = s.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "class {class} needs at least one positive and one negative sample"
        )));
    }
    // midrank the pooled scores
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap());
    let mut ranks = vec![0.0f64; s.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && s[idx[j + 1]] == s[idx[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = midrank;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks
        .iter()
        .zip(y_true)
        .filter(|(_, &t)| t == class)
        .map(|(&r, _)| r)
        .sum();
    let u = rank_sum - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Macro mean of the one-vs-rest AUCs over all K classes.
pub fn roc_auc_macro(scores: &[Vec<f64>], y_true: &[usize], k: usize) -> Result<f64> {
    let mut acc = 0.0;
    for c in 0..k {
        acc += roc_auc(scores, y_true, c)?;
    }
    Ok(acc / k as f64)
}

/// ROC curve for class `class`, one (FPR, TPR) point per distinct threshold
/// plus the (0,0) and (1,1) endpoints.
pub fn roc_curve(scores: &[Vec<f64>], y_true: &[usize], class: usize) -> Result<Vec<(f64, f64)>> {
    let mut pairs: Vec<(f64, bool)> = scores
        .iter()
        .zip(y_true)
        .map(|(row, &t)| (row[class], t == class))
        .collect();
    let n_pos = pairs.iter().filter(|(_, p)| *p).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("single-class input for ROC".into()));
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let thr = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == thr {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(points)
}

/// Overlap counts between two equally-shaped binary masks.
fn overlap(sr: &[u8], gt: &[u8]) -> Result<(u64, u64, u64)> {
    if sr.len() != gt.len() {
        return Err(Error::Shape("mask size mismatch".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&s, &g) in sr.iter().zip(gt) {
        match (s != 0, g != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok((tp, fp, fn_))
}

pub fn jaccard(sr: &[u8], gt: &[u8]) -> Result<f64> {
    let (tp, fp, fn_) = overlap(sr, gt)?;
    let union = tp + fp + fn_;
    if union == 0 {
        return Err(Error::UndefinedMetric("Jaccard of two empty masks".into()));
    }
    Ok(tp as f64 / union as f64)
}

pub fn seg_precision(sr: &[u8], gt: &[u8]) -> Result<f64> {
    let (tp, fp, _) = overlap(sr, gt)?;
    if tp + fp == 0 {
        return Err(Error::UndefinedMetric("precision with an empty prediction".into()));
    }
    Ok(tp as f64 / (tp + fp) as f64)
}

pub fn seg_recall(sr: &[u8], gt: &[u8]) -> Result<f64> {
    let (tp, _, fn_) = overlap(sr, gt)?;
    if tp + fn_ == 0 {
        return Err(Error::UndefinedMetric("recall with an empty ground truth".into()));
    }
    Ok(tp as f64 / (tp + fn_) as f64)
}

/// Unsmoothed hard Dice `2|A∩B| / (|A|+|B|)`.
pub fn dice_unsmoothed(sr: &[u8], gt: &[u8]) -> Result<f64> {
    let (tp, fp, fn_) = overlap(sr, gt)?;
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        return Err(Error::UndefinedMetric("Dice of two empty masks".into()));
    }
    Ok(2.0 * tp as f64 / denom as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // y_true (0,0,1,2), y_pred (0,1,1,2):
    //   class 0: tp=1 fp=0 fn=1 -> P=1, R=0.5, F1=2/3
    //   class 1: tp=1 fp=1 fn=0 -> P=0.5, R=1, F1=2/3
    //   class 2: tp=1 fp=0 fn=0 -> P=1, R=1, F1=1
    fn fixture_cm() -> ConfusionMatrix {
        confusion_matrix(&[0, 0, 1, 2], &[0, 1, 1, 2], 3).unwrap()
    }

    #[test]
    fn confusion_matrix_counts_and_support() {
        let cm = fixture_cm();
        assert_eq!(cm.get(0, 0), 1);
        assert_eq!(cm.get(0, 1), 1);
        assert_eq!(cm.get(1, 1), 1);
        assert_eq!(cm.get(2, 2), 1);
        assert_eq!(cm.total(), 4);
        assert_eq!(cm.support(0), 2);
    }

    #[test]
    fn confusion_matrix_rejects_bad_input() {
        assert!(confusion_matrix(&[], &[], 3).is_err());
        assert!(confusion_matrix(&[0, 1], &[0], 3).is_err());
        assert!(confusion_matrix(&[3], &[0], 3).is_err());
    }

    #[test]
    fn report_fixture_values() {
        let r = classification_report(&fixture_cm()).unwrap();
        assert!((r.accuracy - 0.75).abs() < 1e-12);
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.per_class[1].precision - 0.5).abs() < 1e-12);
        assert!((r.macro_precision - (1.0 + 0.5 + 1.0) / 3.0).abs() < 1e-12);
        assert!((r.macro_recall - (0.5 + 1.0 + 1.0) / 3.0).abs() < 1e-12);
        // weighted by supports 2,1,1
        assert!((r.weighted_precision - (2.0 * 1.0 + 0.5 + 1.0) / 4.0).abs() < 1e-12);
        assert!(!r.per_class.iter().any(|m| m.precision_undefined));
    }

    #[test]
    fn never_predicted_class_flags_undefined_precision() {
        let cm = confusion_matrix(&[0, 1], &[0, 0], 2).unwrap();
        let r = classification_report(&cm).unwrap();
        assert!(r.per_class[1].precision_undefined);
        assert_eq!(r.per_class[1].precision, 0.0);
    }

    #[test]
    fn auc_perfect_separation_is_one() {
        let scores = vec![vec![0.9, 0.1], vec![0.8, 0.2], vec![0.2, 0.8], vec![0.1, 0.9]];
        let y = vec![0, 0, 1, 1];
        assert!((roc_auc(&scores, &y, 0).unwrap() - 1.0).abs() < 1e-12);
        assert!((roc_auc(&scores, &y, 1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_constant_scores_is_half() {
        let scores = vec![vec![0.5]; 6];
        let y = vec![0, 1, 0, 1, 1, 1];
        // every score rows lacks class 1, so score class 0 against labels
        assert!((roc_auc(&scores, &y, 0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auc_hand_computed_fixture() {
        // positives at 0.8, 0.4; negatives at 0.6, 0.2
        // pairs won: (0.8>0.6), (0.8>0.2), (0.4<0.6 loses), (0.4>0.2) = 3/4
        let scores = vec![vec![0.8], vec![0.6], vec![0.4], vec![0.2]];
        let y = vec![0, 1, 0, 1];
        assert!((roc_auc(&scores, &y, 0).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auc_requires_both_classes() {
        let scores = vec![vec![0.5], vec![0.6]];
        assert!(roc_auc(&scores, &[0, 0], 0).is_err());
    }

    #[test]
    fn roc_curve_endpoints_and_monotonicity() {
        let scores = vec![vec![0.9], vec![0.7], vec![0.4], vec![0.2]];
        let y = vec![0, 1, 0, 1];
        let pts = roc_curve(&scores, &y, 0).unwrap();
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
        for w in pts.windows(2) {
            assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn segmentation_overlap_fixture() {
        let sr = [1, 1, 0, 0, 1, 0, 0, 0];
        let gt = [1, 0, 1, 0, 1, 0, 0, 1];
        // tp=2 fp=1 fn=2
        assert!((jaccard(&sr, &gt).unwrap() - 2.0 / 5.0).abs() < 1e-12);
        assert!((seg_precision(&sr, &gt).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((seg_recall(&sr, &gt).unwrap() - 0.5).abs() < 1e-12);
        assert!((dice_unsmoothed(&sr, &gt).unwrap() - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_masks_are_rejected() {
        assert!(jaccard(&[0, 0], &[0, 0]).is_err());
        assert!(seg_precision(&[0, 0], &[1, 0]).is_err());
        assert!(seg_recall(&[1, 0], &[0, 0]).is_err());
        assert!(dice_unsmoothed(&[0], &[0]).is_err());
        assert!(jaccard(&[1], &[1, 0]).is_err());
    }

    proptest! {
        #[test]
        fn jaccard_equals_dice_identity(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1usize..128);
            let sr: Vec<u8> = (0..n).map(|_| rng.gen_range(0u8..2)).collect();
            let mut gt: Vec<u8> = (0..n).map(|_| rng.gen_range(0u8..2)).collect();
            if sr.iter().all(|&v| v == 0) && gt.iter().all(|&v| v == 0) {
                gt[0] = 1;
            }
            let d = dice_unsmoothed(&sr, &gt).unwrap();
            let j = jaccard(&sr, &gt).unwrap();
            prop_assert!((j - d / (2.0 - d)).abs() < 1e-12);
        }

        #[test]
        fn accuracy_in_unit_interval(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1usize..64);
            let yt: Vec<usize> = (0..n).map(|_| rng.gen_range(0usize..3)).collect();
            let yp: Vec<usize> = (0..n).map(|_| rng.gen_range(0usize..3)).collect();
            let r = classification_report(&confusion_matrix(&yt, &yp, 3).unwrap()).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.accuracy));
            prop_assert!(r.macro_f1 <= 1.0 + 1e-12);
        }
    }
}
