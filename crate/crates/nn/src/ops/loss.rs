//! Class-weighted softmax cross-entropy.
//!
//! The loss is the weighted mean `sum_b w[y_b] * nll_b / sum_b w[y_b]`.
//! Weights are rescaled by their maximum before accumulation, which leaves
//! the value unchanged mathematically and makes equal weights reduce to the
//! plain mean bit for bit.

use crate::error::{invalid, NnError, Result};
use crate::ops::activation::softmax_row;
use crate::tensor::{Element, Tensor};

pub struct CrossEntropyOutput<T> {
    pub loss: T,
    /// Softmax probabilities, `B x K`.
    pub probs: Vec<T>,
    /// Per-row share of the loss, `w[y_b] / sum w[y]`.
    pub row_weights: Vec<T>,
}

pub fn weighted_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
    class_weights: &[f64],
) -> Result<CrossEntropyOutput<T>> {
    let (b, k) = logits.dims2("weighted_cross_entropy")?;
    if labels.len() != b {
        return Err(NnError::ShapeMismatch {
            op: "weighted_cross_entropy",
            dim: "label count",
            expected: b,
            actual: labels.len(),
        });
    }
    if class_weights.len() != k {
        return Err(NnError::ShapeMismatch {
            op: "weighted_cross_entropy",
            dim: "class weight count",
            expected: k,
            actual: class_weights.len(),
        });
    }
    if class_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(invalid("weighted_cross_entropy", "class weights must be positive"));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(NnError::LabelOutOfRange { label, classes: k });
    }
    let wmax = class_weights.iter().copied().fold(0.0, f64::max);
    let rel: Vec<T> = labels
        .iter()
        .map(|&l| T::from_f64(class_weights[l] / wmax))
        .collect();
    let total: T = rel.iter().copied().sum();

    let mut probs = Vec::with_capacity(b * k);
    let mut acc = T::zero();
    for (row, (&label, &r)) in logits.data().chunks_exact(k).zip(labels.iter().zip(&rel)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        acc += r * (lse - row[label]);
        probs.extend(softmax_row(row));
    }
    let loss = acc / total;
    if !loss.is_finite() {
        return Err(NnError::NonFinite {
            op: "weighted_cross_entropy",
        });
    }
    Ok(CrossEntropyOutput {
        loss,
        probs,
        row_weights: rel.into_iter().map(|r| r / total).collect(),
    })
}

/// Gradient with respect to the logits, scaled by `grad_loss`.
pub fn weighted_cross_entropy_backward<T: Element>(
    probs: &[T],
    row_weights: &[T],
    labels: &[usize],
    grad_loss: T,
) -> Vec<T> {
    let k = probs.len() / labels.len();
    let mut d = probs.to_vec();
    for (b, row) in d.chunks_exact_mut(k).enumerate() {
        row[labels[b]] -= T::one();
        let s = row_weights[b] * grad_loss;
        row.iter_mut().for_each(|v| *v = *v * s);
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ce(logits: &[f64], rows: usize, labels: &[usize], w: &[f64]) -> f64 {
        let t = Tensor::from_f64(&[rows, logits.len() / rows], logits).unwrap();
        weighted_cross_entropy::<f64>(&t, labels, w).unwrap().loss
    }

    #[test]
    fn uniform_logits_give_ln3() {
        let l = ce(&[0.0; 3], 1, &[1], &[1.0; 3]);
        assert!((l - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn weights_cancel_for_uniform_logits() {
        let l = ce(&[0.0; 6], 2, &[0, 2], &[1.0, 2.0, 3.0]);
        assert!((l - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let l = ce(&[margin, 0.0, 0.0], 1, &[0], &[1.0; 3]);
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn equal_weights_match_plain_mean_exactly() {
        let logits = [0.3, -1.2, 2.0, 0.7, 0.1, -0.4, 1.9, 1.1, -2.2];
        let labels = [2, 0, 1];
        let plain = ce(&logits, 3, &labels, &[1.0; 3]);
        for c in [0.3, 3.0, 7.77] {
            assert_eq!(ce(&logits, 3, &labels, &[c; 3]), plain);
        }
    }

    #[test]
    fn rejects_bad_labels_and_weights() {
        let t = Tensor::<f64>::zeros(&[1, 3]);
        assert_eq!(
            weighted_cross_entropy(&t, &[3], &[1.0; 3]).err(),
            Some(NnError::LabelOutOfRange { label: 3, classes: 3 })
        );
        assert!(weighted_cross_entropy(&t, &[0], &[1.0, 0.0, 1.0]).is_err());
    }
}
