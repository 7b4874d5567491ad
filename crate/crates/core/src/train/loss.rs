use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// `w_k = total / (K · n_k)` from training-split counts. Classes absent
/// from the split get weight 0.
pub fn class_weights(counts: &BTreeMap<usize, usize>, num_classes: usize) -> Vec<f64> {
    let total: usize = counts.values().sum();
    (0..num_classes)
        .map(|k| match counts.get(&k) {
            Some(&n) if n > 0 => total as f64 / (num_classes * n) as f64,
            _ => 0.0,
        })
        .collect()
}

/// `−w_y · log softmax(logits)_y` and its gradient w.r.t. the logits.
pub fn weighted_ce(logits: &[f64], label: usize, weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    let k = logits.len();
    if label >= k || weights.len() != k {
        return Err(Error::data(format!(
            "label {label} with {k} logits and {} class weights",
            weights.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let log_p = logits[label] - max - total.ln();
    if !log_p.is_finite() {
        return Err(Error::NonFinite("cross-entropy".into()));
    }
    let w = weights[label];
    let grad = exps
        .iter()
        .enumerate()
        .map(|(j, &e)| w * (e / total - if j == label { 1.0 } else { 0.0 }))
        .collect();
    Ok((-w * log_p, grad))
}

/// Summed weighted cross-entropy of a batch divided by `norm` (the number of
/// samples in the optimizer step), with the matching logit gradient.
pub fn batch_loss<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
    weights: &[f64],
    norm: usize,
) -> Result<(f64, Tensor<T>)> {
    if logits.rows() != labels.len() || norm == 0 {
        return Err(Error::shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let k = logits.cols();
    let inv = 1.0 / norm as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (r, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
        let (l, g) = weighted_ce(&row, y, weights)?;
        total += l;
        grad.extend(g.into_iter().map(|v| T::of(v * inv)));
    }
    Ok((total * inv, Tensor::new(vec![labels.len(), k], grad)?))
}

pub fn softmax_probs<T: Real>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|r| {
            let row: Vec<f64> = logits.row(r).iter().map(|v| v.as_f64()).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}
