use crate::error::{NnError, Result};
use crate::tensor::{Element, Tensor};

/// Affine map `input (B x F) * weights (F x K) + bias (K)`.
pub fn linear_forward<T: Element>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, f) = input.dims2("linear")?;
    let (wf, k) = weights.dims2("linear")?;
    if wf != f {
        return Err(NnError::ShapeMismatch {
            op: "linear",
            dim: "input features",
            expected: wf,
            actual: f,
        });
    }
    if bias.len() != k {
        return Err(NnError::ShapeMismatch {
            op: "linear",
            dim: "bias length",
            expected: k,
            actual: bias.len(),
        });
    }
    let mut out: Vec<T> = (0..b).flat_map(|_| bias.data().iter().copied()).collect();
    T::gemm(
        b,
        f,
        k,
        T::one(),
        input.data(),
        f as isize,
        1,
        weights.data(),
        k as isize,
        1,
        T::one(),
        &mut out,
        k as isize,
        1,
    );
    Tensor::new(&[b, k], out)
}

pub struct LinearGrads<T> {
    pub input: Vec<T>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

pub fn linear_backward<T: Element>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &[T],
) -> LinearGrads<T> {
    let (b, f) = (input.shape()[0], input.shape()[1]);
    let k = weights.shape()[1];
    let mut dx = vec![T::zero(); b * f];
    // dx[B, F] = dy[B, K] * W^T[K, F]
    T::gemm(
        b,
        k,
        f,
        T::one(),
        grad_out,
        k as isize,
        1,
        weights.data(),
        1,
        k as isize,
        T::zero(),
        &mut dx,
        f as isize,
        1,
    );
    let mut dw = vec![T::zero(); f * k];
    // dW[F, K] = x^T[F, B] * dy[B, K]
    T::gemm(
        f,
        b,
        k,
        T::one(),
        input.data(),
        1,
        f as isize,
        grad_out,
        k as isize,
        1,
        T::zero(),
        &mut dw,
        k as isize,
        1,
    );
    let mut db = vec![T::zero(); k];
    for row in grad_out.chunks_exact(k) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    LinearGrads {
        input: dx,
        weights: dw,
        bias: db,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        let mut w = Tensor::<f64>::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let y = linear_forward(&x, &w, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_weights_give_bias_rows() {
        let x = Tensor::<f64>::full(&[4, 5], 3.0);
        let b = Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let y = linear_forward(&x, &Tensor::zeros(&[5, 3]), &b).unwrap();
        for row in y.data().chunks(3) {
            assert_eq!(row, &[1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn hand_product() {
        let x = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        let w = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2], &[0.5, -0.5]).unwrap();
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[1.5, 1.5]);
    }

    #[test]
    fn dimension_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 4]);
        assert!(linear_forward(&x, &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[2])).is_err());
        assert!(linear_forward(&x, &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[3])).is_err());
    }
}
