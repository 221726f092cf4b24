//! Evaluation formulas: AUC, accuracy / recall / precision and the Dice
//! similarity coefficient.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::BinaryMask;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("AUC needs at least one positive and one negative instance")]
    OneClassOnly,
    #[error("length mismatch: {0} predictions vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("{0} is undefined: zero denominator")]
    DivisionUndefined(&'static str),
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((u32, u32), (u32, u32)),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// AUC by exhaustive pair counting; a tied pair counts one half.
///
/// `data` holds (score, label) pairs with labels in {0, 1}.
pub fn auc(data: &[(f64, u8)]) -> Result<f64, MetricsError> {
    let positives: Vec<f64> = data.iter().filter(|d| d.1 == 1).map(|d| d.0).collect();
    let negatives: Vec<f64> = data.iter().filter(|d| d.1 != 1).map(|d| d.0).collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(MetricsError::OneClassOnly);
    }
    // counted in half-units so the sum stays an exact integer
    let mut halves: u64 = 0;
    for &p in &positives {
        for &n in &negatives {
            halves += match p.partial_cmp(&n) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    Ok(halves as f64 / (2.0 * positives.len() as f64 * negatives.len() as f64))
}

/// Rank-sum (Mann–Whitney U) form of [`auc`], O(n log n), average ranks for ties.
pub fn auc_ranked(data: &[(f64, u8)]) -> Result<f64, MetricsError> {
    let n_pos = data.iter().filter(|d| d.1 == 1).count();
    let n_neg = data.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::OneClassOnly);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data[a].0.total_cmp(&data[b].0));
    // Twice the positive rank sum, 1-based ranks; tied blocks share the mean rank.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && data[order[j + 1]].0 == data[order[i]].0 {
            j += 1;
        }
        let twice_mean_rank = (i + 1 + j + 1) as u64;
        let pos_in_block = order[i..=j].iter().filter(|&&k| data[k].1 == 1).count() as u64;
        twice_rank_sum += twice_mean_rank * pos_in_block;
        i = j + 1;
    }
    let n_pos = n_pos as u64;
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// ROC curve points (fpr, tpr), one per distinct score threshold, starting at (0, 0).
pub fn roc_points(data: &[(f64, u8)]) -> Result<Vec<(f64, f64, f64)>, MetricsError> {
    let n_pos = data.iter().filter(|d| d.1 == 1).count() as f64;
    let n_neg = data.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(MetricsError::OneClassOnly);
    }
    let mut sorted = data.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(f64::INFINITY, 0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((threshold, fp / n_neg, tp / n_pos));
    }
    Ok(points)
}

pub fn confusion(preds: &[u8], labels: &[u8]) -> Result<ConfusionCounts, MetricsError> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), labels.len()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &l) in preds.iter().zip(labels) {
        match (p == 1, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64, what: &'static str) -> Result<f64, MetricsError> {
    if den == 0 {
        return Err(MetricsError::DivisionUndefined(what));
    }
    Ok(num as f64 / den as f64)
}

pub fn accuracy(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    ratio(c.tp + c.tn, c.total(), "accuracy")
}

pub fn recall(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    ratio(c.tp, c.tp + c.fn_, "recall")
}

pub fn precision(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    ratio(c.tp, c.tp + c.fp, "precision")
}

pub fn specificity(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    ratio(c.tn, c.tn + c.fp, "specificity")
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks agree perfectly (1.0).
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MetricsError> {
    if a.dimensions() != b.dimensions() {
        return Err(MetricsError::ShapeMismatch(a.dimensions(), b.dimensions()));
    }
    let (mut inter, mut size_a, mut size_b) = (0u64, 0u64, 0u64);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        let (x, y) = (x != 0, y != 0);
        inter += u64::from(x && y);
        size_a += u64::from(x);
        size_b += u64::from(y);
    }
    if size_a + size_b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (size_a + size_b) as f64)
}
