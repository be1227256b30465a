use serde::{Deserialize, Serialize};

use crate::error::{CsaError, Result};
use crate::graph::Graph;
use crate::models::{Model, Overrides};
use crate::tensor::Tensor;

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `mask` nodes whose arg-max logit equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(CsaError::invalid("accuracy over an empty mask"));
    }
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(CsaError::shape("accuracy", logits.shape(), &[labels.len()]));
    }
    let mut correct = 0usize;
    for &i in mask {
        if i >= labels.len() {
            return Err(CsaError::invalid(format!("mask node {i} out of range")));
        }
        if argmax(logits.row(i)) == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / mask.len() as f64)
}

/// Evaluation-mode accuracy of `model` on `mask`.
pub fn evaluate(model: &Model, g: &Graph, overrides: &Overrides, mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(CsaError::invalid("evaluate over an empty mask"));
    }
    accuracy(&model.predict(g, overrides)?, g.labels(), mask)
}

/// Which node pairs enter the mean average distance.
#[derive(Debug, Clone, Copy)]
pub enum MadPairs<'a> {
    All,
    /// Only pairs whose labels differ.
    InterClass(&'a [usize]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MadResult {
    pub value: f64,
    pub pairs: usize,
    /// Rows with zero norm, left out of every pair.
    pub zero_rows: usize,
}

/// Mean cosine distance `1 - cos(h_i, h_j)` over unordered pairs `i < j`.
pub fn mad(features: &Tensor, pairs: MadPairs<'_>) -> Result<MadResult> {
    if features.shape().len() != 2 {
        return Err(CsaError::shape("mad", features.shape(), &[0, 0]));
    }
    let n = features.rows();
    if let MadPairs::InterClass(labels) = pairs {
        if labels.len() != n {
            return Err(CsaError::shape("mad", features.shape(), &[labels.len()]));
        }
    }
    let norms: Vec<f64> = (0..n)
        .map(|i| features.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let usable: Vec<usize> = (0..n).filter(|&i| norms[i] > 0.0).collect();
    let zero_rows = n - usable.len();
    if usable.len() < 2 {
        return Err(CsaError::invalid(format!(
            "mad needs at least 2 non-zero rows, got {}",
            usable.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, &i) in usable.iter().enumerate() {
        for &j in &usable[a + 1..] {
            if let MadPairs::InterClass(labels) = pairs {
                if labels[i] == labels[j] {
                    continue;
                }
            }
            let dot: f64 = features.row(i).iter().zip(features.row(j)).map(|(x, y)| x * y).sum();
            total += 1.0 - dot / (norms[i] * norms[j]);
            count += 1;
        }
    }
    if count == 0 {
        return Err(CsaError::invalid("mad has no node pairs to compare"));
    }
    Ok(MadResult {
        value: total / count as f64,
        pairs: count,
        zero_rows,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean negative log-likelihood over `mask`, outside of any tape.
pub fn masked_cross_entropy(logits: &Tensor, labels: &[usize], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(CsaError::invalid("cross entropy over an empty mask"));
    }
    let mut total = 0.0;
    for &i in mask {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[labels[i]];
    }
    Ok(total / mask.len() as f64)
}
