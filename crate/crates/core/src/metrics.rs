//! Binary classification metrics: ROC AUC, accuracy/F1 and precision-recall curves.

use std::cmp::Ordering;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("DegenerateLabels: both classes are required")]
    DegenerateLabels,
    #[error("NoPositives: precision-recall curve needs a positive label")]
    NoPositives,
    #[error("empty input")]
    Empty,
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredLabel {
    pub score: f64,
    pub label: bool,
}

impl ScoredLabel {
    pub fn new(score: f64, label: bool) -> Self {
        ScoredLabel { score, label }
    }
}

/// Default decision threshold for accuracy and F1.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_finite(items: &[ScoredLabel]) -> Result<(), MetricsError> {
    match items.iter().position(|it| !it.score.is_finite()) {
        Some(i) => Err(MetricsError::NonFiniteScore(i)),
        None => Ok(()),
    }
}

/// Mann-Whitney AUC: the fraction of positive/negative pairs ordered
/// correctly, ties counting one half.
pub fn auc(items: &[ScoredLabel]) -> Result<f64, MetricsError> {
    check_finite(items)?;
    let n_pos = items.iter().filter(|it| it.label).count();
    let n_neg = items.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::DegenerateLabels);
    }

    let mut sorted: Vec<&ScoredLabel> = items.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));

    // Walk groups of equal scores in ascending order; each positive beats every
    // negative seen in earlier groups and ties with the negatives in its own.
    // Counts stay integral (doubled) so the only rounding is the final division.
    let mut twice_wins: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            if sorted[j].label {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_wins += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(twice_wins as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccF1 {
    pub acc: f64,
    pub f1: f64,
}

/// Accuracy and F1 of the predictions `score >= threshold`.
pub fn acc_f1(items: &[ScoredLabel], threshold: f64) -> Result<AccF1, MetricsError> {
    if items.is_empty() {
        return Err(MetricsError::Empty);
    }
    check_finite(items)?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for it in items {
        match (it.score >= threshold, it.label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let acc = (tp + tn) as f64 / items.len() as f64;
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(AccF1 { acc, f1 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision-recall points, one per distinct score in descending order. The
/// point at threshold `t` classifies `score >= t` as positive.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

impl PrCurve {
    pub fn max_precision(&self) -> f64 {
        self.points.iter().map(|p| p.precision).fold(0.0, f64::max)
    }

    /// The point with the lowest threshold strictly above `value`, i.e. the
    /// operating point of the rule `score > value`.
    pub fn point_above(&self, value: f64) -> Option<&PrPoint> {
        self.points.iter().rev().find(|p| p.threshold > value)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("#threshold\tprecision\trecall\n");
        for p in &self.points {
            out.push_str(&format!(
                "{:.6}\t{:.6}\t{:.6}\n",
                p.threshold, p.precision, p.recall
            ));
        }
        out
    }
}

pub fn pr_curve(items: &[ScoredLabel]) -> Result<PrCurve, MetricsError> {
    check_finite(items)?;
    let n_pos = items.iter().filter(|it| it.label).count();
    if n_pos == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut sorted: Vec<&ScoredLabel> = items.iter().collect();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));

    let mut points = Vec::new();
    let (mut tp, mut predicted) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].score;
        while i < sorted.len() && sorted[i].score == threshold {
            predicted += 1;
            tp += usize::from(sorted[i].label);
            i += 1;
        }
        points.push(PrPoint {
            threshold,
            precision: tp as f64 / predicted as f64,
            recall: tp as f64 / n_pos as f64,
        });
    }
    Ok(PrCurve { points })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(scores: &[f64], labels: &[u8]) -> Vec<ScoredLabel> {
        scores
            .iter()
            .zip(labels)
            .map(|(&s, &l)| ScoredLabel::new(s, l == 1))
            .collect()
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&items(&[0.9, 0.8, 0.3], &[1, 0, 1])), Ok(0.5));
        assert_eq!(auc(&items(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0])), Ok(1.0));
        assert_eq!(auc(&items(&[0.4; 5], &[1, 0, 1, 0, 0])), Ok(0.5));
        assert_eq!(
            auc(&items(&[0.4, 0.2], &[1, 1])),
            Err(MetricsError::DegenerateLabels)
        );
        assert_eq!(
            auc(&items(&[f64::NAN, 0.2], &[1, 0])),
            Err(MetricsError::NonFiniteScore(0))
        );
    }

    #[test]
    fn acc_f1_examples() {
        // predictions 1,1,0,0 against labels 1,0,1,0: two correct
        let r = acc_f1(&items(&[0.9, 0.6, 0.4, 0.1], &[1, 0, 1, 0]), 0.5).unwrap();
        assert_eq!(r.acc, 0.5);
        assert_eq!(r.f1, 0.5);
        let none = acc_f1(&items(&[0.1, 0.2], &[1, 0]), 0.5).unwrap();
        assert_eq!(none.f1, 0.0);
        let perfect = acc_f1(&items(&[0.9, 0.1], &[1, 0]), 0.5).unwrap();
        assert_eq!((perfect.acc, perfect.f1), (1.0, 1.0));
        assert_eq!(acc_f1(&[], 0.5), Err(MetricsError::Empty));
    }

    #[test]
    fn pr_curve_examples() {
        let curve = pr_curve(&items(&[0.9, 0.5, 0.2], &[1, 0, 0])).unwrap();
        assert_eq!(curve.points[0].precision, 1.0);
        let all_pos = pr_curve(&items(&[0.9, 0.5, 0.5, 0.2], &[1, 1, 1, 1])).unwrap();
        assert_eq!(all_pos.points.len(), 3);
        assert!(all_pos.points.iter().all(|p| p.precision == 1.0));
        assert_eq!(all_pos.points.last().unwrap().recall, 1.0);
        assert_eq!(
            pr_curve(&items(&[0.3], &[0])),
            Err(MetricsError::NoPositives)
        );
    }

    #[test]
    fn point_above_selects_strict_rule() {
        let curve = pr_curve(&items(&[0.4, 0.2, 0.0, 0.0], &[1, 0, 1, 0])).unwrap();
        let p = curve.point_above(0.0).unwrap();
        assert_eq!(p.threshold, 0.2);
        assert_eq!(p.recall, 0.5);
        assert!(curve.point_above(0.4).is_none());
    }
}
