//! Macro-averaged classification metrics.
//!
//! F1 uses the zero-division convention: a class with no true positives
//! (including one absent from both labels and predictions) scores 0 and
//! still counts toward the macro mean. One-vs-rest AUC is the Mann–Whitney
//! statistic with ties counted as one half; classes lacking positives or
//! negatives are left out of the macro mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `matrix[true][predicted]` counts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_predictions(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        check_lengths(predictions.len(), labels.len())?;
        let mut counts = vec![0; classes * classes];
        for (&p, &y) in predictions.iter().zip(labels) {
            if p >= classes || y >= classes {
                return Err(Error::InvalidInput(format!(
                    "class index out of range: prediction {p}, label {y}, classes {classes}"
                )));
            }
            counts[y * classes + p] += 1;
        }
        Ok(Self { classes, counts })
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn true_count(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.get(class, p)).sum()
    }

    pub fn predicted_count(&self, class: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, class)).sum()
    }

    /// `(precision, recall, f1)` for one class, zero where undefined.
    pub fn class_scores(&self, class: usize) -> (f64, f64, f64) {
        let tp = self.get(class, class) as f64;
        let predicted = self.predicted_count(class) as f64;
        let actual = self.true_count(class) as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        // 2PR / (P + R) in count form, rounded once.
        let denom = predicted + actual;
        let f1 = if tp > 0.0 { 2.0 * tp / denom } else { 0.0 };
        (precision, recall, f1)
    }

    pub fn macro_f1(&self) -> f64 {
        (0..self.classes).map(|c| self.class_scores(c).2).sum::<f64>() / self.classes as f64
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidInput(format!("length mismatch: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::InvalidInput("no samples".into()));
    }
    Ok(())
}

pub fn macro_f1(predictions: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    Ok(ConfusionMatrix::from_predictions(predictions, labels, classes)?.macro_f1())
}

/// One-vs-rest AUC of a single score column, or `None` when the class has no
/// positives or no negatives.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of 1-based mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid_rank * order[i..j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Macro one-vs-rest AUC. `scores` is row-major `n x classes`.
pub fn macro_auc(scores: &[f64], labels: &[usize], classes: usize) -> Result<f64> {
    if classes == 0 || scores.len() != labels.len() * classes {
        return Err(Error::InvalidInput(format!(
            "{} scores do not form {} rows of {classes}",
            scores.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("no samples".into()));
    }
    let per_class: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let column: Vec<f64> = scores.chunks(classes).map(|row| row[c]).collect();
            let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            binary_auc(&column, &positive)
        })
        .collect();
    if per_class.is_empty() {
        return Err(Error::UndefinedMetric(
            "every class lacks positives or negatives".into(),
        ));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

pub fn argmax_rows(probs: &[f64], classes: usize) -> Vec<usize> {
    probs
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub macro_f1: f64,
    /// `None` when no class has both positives and negatives.
    pub macro_auc: Option<f64>,
    pub per_class: Vec<ClassScores>,
    pub confusion: ConfusionMatrix,
}

/// Scores probability rows against labels, predicting the argmax class.
pub fn evaluate(probs: &[f64], labels: &[usize], classes: usize) -> Result<EvalResult> {
    let predictions = argmax_rows(probs, classes);
    let confusion = ConfusionMatrix::from_predictions(&predictions, labels, classes)?;
    let per_class = (0..classes)
        .map(|c| {
            let (precision, recall, f1) = confusion.class_scores(c);
            ClassScores {
                precision,
                recall,
                f1,
            }
        })
        .collect();
    let macro_auc = match macro_auc(probs, labels, classes) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalResult {
        macro_f1: confusion.macro_f1(),
        macro_auc,
        per_class,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1, 0];
        assert_eq!(macro_f1(&y, &y, 3).unwrap(), 1.0);
    }

    #[test]
    fn hand_computed_confusion() {
        // Class 0: tp 2, fp 1 (sample 4) -> F1 0.8. Class 1: tp 2, fp 1
        // (sample 5) -> F1 0.8. Class 2: tp 0 -> F1 0.
        let labels = [0, 0, 1, 1, 2, 2];
        let preds = [0, 0, 1, 1, 0, 1];
        let cm = ConfusionMatrix::from_predictions(&preds, &labels, 3).unwrap();
        let f1: Vec<f64> = (0..3).map(|c| cm.class_scores(c).2).collect();
        assert!((f1[0] - 0.8).abs() < 1e-15);
        assert!((f1[1] - 0.8).abs() < 1e-15);
        assert_eq!(f1[2], 0.0);
        assert!((cm.macro_f1() - 1.6 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_prediction_on_balanced_labels() {
        let labels = [0, 1, 2, 0, 1, 2];
        let f = macro_f1(&[1; 6], &labels, 3).unwrap();
        assert!((f - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn f1_input_errors() {
        assert!(matches!(macro_f1(&[0, 1], &[0], 2), Err(Error::InvalidInput(_))));
        assert!(matches!(macro_f1(&[3], &[0], 2), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn auc_examples() {
        // Positives (0.9, 0.4), negatives (0.6, 0.1): pairs 0.9>0.6, 0.9>0.1,
        // 0.4<0.6, 0.4>0.1 -> 3 of 4.
        let auc = binary_auc(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap();
        assert!((auc - 0.75).abs() < 1e-15);

        let labels = [0, 1, 2, 1];
        let perfect: Vec<f64> = labels
            .iter()
            .flat_map(|&y| (0..3).map(move |c| if c == y { 0.8 } else { 0.1 }))
            .collect();
        assert_eq!(macro_auc(&perfect, &labels, 3).unwrap(), 1.0);
        let flat = vec![1.0 / 3.0; 12];
        assert_eq!(macro_auc(&flat, &labels, 3).unwrap(), 0.5);
    }

    #[test]
    fn auc_skips_degenerate_classes() {
        // Class 2 never occurs, so only classes 0 and 1 contribute.
        let scores = [0.9, 0.1, 0.0, 0.2, 0.8, 0.0];
        assert_eq!(macro_auc(&scores, &[0, 1], 3).unwrap(), 1.0);
        assert!(matches!(
            macro_auc(&[0.5, 0.5, 0.5, 0.5], &[0, 0], 2),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn evaluate_consistency() {
        let probs = [0.7, 0.2, 0.1, 0.1, 0.8, 0.1, 0.3, 0.3, 0.4, 0.5, 0.4, 0.1];
        let labels = [0, 1, 2, 1];
        let r = evaluate(&probs, &labels, 3).unwrap();
        for c in 0..3 {
            assert_eq!(
                r.confusion.true_count(c),
                labels.iter().filter(|&&y| y == c).count() as u64
            );
        }
        let mean = r.per_class.iter().map(|s| s.f1).sum::<f64>() / 3.0;
        assert_eq!(r.macro_f1, mean);
    }
}
