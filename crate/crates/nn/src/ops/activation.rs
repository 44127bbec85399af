use crate::error::{invalid, Result};
use crate::tensor::{Element, Tensor};

pub fn relu_forward<T: Element>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::new(input.shape(), data).expect("same shape")
}

/// Gradient mask taken from the forward output (`y > 0`).
pub fn relu_backward<T: Element>(output: &[T], grad_out: &[T]) -> Vec<T> {
    output
        .iter()
        .zip(grad_out)
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect()
}

/// Row-wise softmax of a `B x K` matrix, shifted by the row max.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = logits.dims2("softmax")?;
    if k < 2 {
        return Err(invalid("softmax", format!("need at least 2 classes, got {k}")));
    }
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        out.extend(softmax_row(row));
    }
    Tensor::new(logits.shape(), out)
}

pub(crate) fn softmax_row<T: Element>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
