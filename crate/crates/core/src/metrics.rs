//! Classification metrics: accuracy, ROC AUC, macro-F1 and the multiclass Matthews
//! correlation coefficient.

use crate::error::{KlrError, Result};

/// Counts with rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_labels(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<Self> {
        check_lengths(y_true.len(), y_pred.len())?;
        let mut cm = Self::new(classes);
        for (&t, &p) in y_true.iter().zip(y_pred) {
            if t >= classes || p >= classes {
                return Err(KlrError::Validation(format!(
                    "label pair ({t}, {p}) outside {classes} classes"
                )));
            }
            cm.counts[t * classes + p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    /// Samples whose true class is `k`.
    pub fn row_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|j| self.get(k, j)).sum()
    }

    /// Samples predicted as class `k`.
    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, k)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(KlrError::Dimension(format!("{a} true labels, {b} predictions")));
    }
    if a == 0 {
        return Err(KlrError::UndefinedMetric("no samples".into()));
    }
    Ok(())
}

pub fn accuracy<T: PartialEq>(y_true: &[T], y_pred: &[T]) -> Result<f64> {
    check_lengths(y_true.len(), y_pred.len())?;
    let hits = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / y_true.len() as f64)
}

/// Rank-statistic AUC, `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`, with midranks for ties.
pub fn roc_auc(y_true: &[usize], scores: &[f64]) -> Result<f64> {
    check_lengths(y_true.len(), scores.len())?;
    if let Some(&bad) = y_true.iter().find(|&&y| y > 1) {
        return Err(KlrError::Validation(format!("AUC labels must be 0 or 1, got {bad}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(KlrError::Validation("NaN score".into()));
    }
    let n_pos = y_true.iter().filter(|&&y| y == 1).count();
    let n_neg = y_true.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(KlrError::UndefinedMetric(
            "AUC needs both classes in the labels".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        let pos = idx[i..=j].iter().filter(|&&k| y_true[k] == 1).count();
        pos_rank_sum += midrank * pos as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean of per-class F1; a class with `P + R = 0` contributes 0.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    let c = cm.classes();
    let mut sum = 0.0;
    for k in 0..c {
        let tp = cm.get(k, k) as f64;
        let predicted = cm.col_sum(k) as f64;
        let actual = cm.row_sum(k) as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    sum / c as f64
}

/// Multiclass MCC (Gorodkin's `R_K`); 0 when either denominator factor vanishes.
pub fn mcc(cm: &ConfusionMatrix) -> f64 {
    let c = cm.classes();
    let s = cm.total() as f64;
    let correct = cm.trace() as f64;
    let (mut pt, mut pp, mut tt) = (0.0, 0.0, 0.0);
    for k in 0..c {
        let t = cm.row_sum(k) as f64;
        let p = cm.col_sum(k) as f64;
        pt += p * t;
        pp += p * p;
        tt += t * t;
    }
    let den_p = s * s - pp;
    let den_t = s * s - tt;
    if den_p == 0.0 || den_t == 0.0 {
        return 0.0;
    }
    (correct * s - pt) / (den_p.sqrt() * den_t.sqrt())
}
