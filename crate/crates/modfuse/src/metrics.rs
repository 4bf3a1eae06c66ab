//! Classification metrics computed from scratch.
//!
//! All metrics return `f64` in `[0, 1]`. Degenerate per-class cases follow
//! one rule: a class that cannot be evaluated is skipped (AUC without both a
//! positive and a negative, F1 without support) or contributes 0 (specificity
//! with an empty denominator), and each such class is logged, so sweeps over
//! unlucky folds keep running instead of erroring.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// ── helpers ──

fn check_lengths(preds: usize, labels: usize) -> Result<()> {
    if labels == 0 {
        return Err(Error::Contract("metrics need at least one sample".into()));
    }
    if preds != labels {
        return Err(Error::Contract(format!("{preds} predictions vs {labels} labels")));
    }
    Ok(())
}

fn check_class_range(values: &[usize], classes: usize, what: &str) -> Result<()> {
    if let Some(&v) = values.iter().find(|&&v| v >= classes) {
        return Err(Error::Param(format!("{what} {v} out of range for {classes} classes")));
    }
    Ok(())
}

// ── accuracy ──

/// Fraction of exactly correct predictions.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    let hits = preds.iter().zip(labels.iter()).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

// ── one-vs-rest AUC ──

/// Rank-sum AUC for one score column: positives' average ranks, ties shared.
///
/// Equivalent to counting score pairs (positive vs negative) with ties worth
/// 0.5 — both reduce to sums of half-integers, so the equality is exact in
/// floating point, not approximate.
fn auc_binary(scores: &[f64], positive: &[bool]) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = n - n_pos;
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j share the average (i + 1 + j) / 2.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&s| positive[s]).count();
        rank_sum_pos += avg_rank * pos_in_group as f64;
        i = j;
    }
    (rank_sum_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64)
}

/// Macro one-vs-rest AUC over the score columns.
///
/// Each class needs at least one positive and one negative sample; classes
/// that lack one are skipped and logged. If no class is evaluable (all labels
/// identical), the metric is undefined.
pub fn auc_ovr<S: Scalar>(scores: &Tensor<S>, labels: &[usize]) -> Result<f64> {
    if scores.shape().len() != 2 {
        return Err(Error::shape("auc_ovr", format!("expected [N × C], got {:?}", scores.shape())));
    }
    let (n, classes) = (scores.shape()[0], scores.shape()[1]);
    check_lengths(n, labels.len())?;
    if n < 2 {
        return Err(Error::Contract("auc_ovr needs at least 2 samples".into()));
    }
    check_class_range(labels, classes, "label")?;
    if !scores.is_finite() {
        return Err(Error::Numeric("auc_ovr scores contain non-finite values".into()));
    }
    let mut total = 0.0;
    let mut evaluated = 0usize;
    for class in 0..classes {
        let positive: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        let n_pos = positive.iter().filter(|&&p| p).count();
        if n_pos == 0 || n_pos == n {
            log::warn!("auc_ovr: class {class} skipped (needs ≥1 positive and ≥1 negative)");
            continue;
        }
        let column: Vec<f64> = (0..n).map(|r| scores.at2(r, class).to_f64_c()).collect();
        total += auc_binary(&column, &positive);
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::MetricUndefined(
            "auc_ovr: every class lacks a positive or a negative sample".into(),
        ));
    }
    Ok(total / evaluated as f64)
}

// ── F1 and specificity ──

/// Macro F1 over classes with non-zero support; zero-support classes are
/// skipped and logged. Per class, precision and recall come from the
/// confusion counts; an empty precision denominator yields F1 = 0.
pub fn f1_macro(preds: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    check_class_range(labels, classes, "label")?;
    check_class_range(preds, classes, "prediction")?;
    let mut total = 0.0;
    let mut evaluated = 0usize;
    for class in 0..classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&p, &l) in preds.iter().zip(labels.iter()) {
            match (p == class, l == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        if tp + fn_ == 0 {
            log::warn!("f1_macro: class {class} skipped (zero support)");
            continue;
        }
        let f1 = if tp == 0 {
            0.0
        } else {
            let precision = tp as f64 / (tp + fp) as f64;
            let recall = tp as f64 / (tp + fn_) as f64;
            2.0 * precision * recall / (precision + recall)
        };
        total += f1;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::MetricUndefined("f1_macro: no class has support".into()));
    }
    Ok(total / evaluated as f64)
}

/// Macro specificity TN / (TN + FP) over all `classes` classes. A class whose
/// denominator is empty (every sample belongs to it) contributes 0 and is
/// logged.
pub fn specificity_macro(preds: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    check_class_range(labels, classes, "label")?;
    check_class_range(preds, classes, "prediction")?;
    if classes == 0 {
        return Err(Error::Param("specificity_macro needs at least one class".into()));
    }
    let mut total = 0.0;
    for class in 0..classes {
        let mut tn = 0usize;
        let mut fp = 0usize;
        for (&p, &l) in preds.iter().zip(labels.iter()) {
            if l != class {
                if p == class {
                    fp += 1;
                } else {
                    tn += 1;
                }
            }
        }
        if tn + fp == 0 {
            log::warn!(
                "specificity_macro: class {class} has no true negatives or false positives; \
                 contributes 0"
            );
            continue;
        }
        total += tn as f64 / (tn + fp) as f64;
    }
    Ok(total / classes as f64)
}

// ── tests ──
