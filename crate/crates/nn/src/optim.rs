//! Adam with bias-corrected moment estimates.

use crate::error::{invalid, NnError, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
}

impl<T: Element> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl<T: Element> AdamState<T> {
    pub fn new(beta1: f64, beta2: f64, eps_opt: f64) -> Self {
        Self {
            m: Vec::new(),
            v: Vec::new(),
            step_count: 0,
            beta1,
            beta2,
            eps_opt,
        }
    }

    /// Applies one update to every tensor in `params` using its `grad`
    /// buffer. Tensors without a gradient are treated as having a zero one.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(invalid("adam", format!("learning rate {lr} must be non-negative")));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(NnError::ShapeMismatch {
                op: "adam",
                dim: "parameter count",
                expected: self.m.len(),
                actual: params.len(),
            });
        }
        for (i, p) in params.iter().enumerate() {
            if p.len() != self.m[i].len() {
                return Err(NnError::ShapeMismatch {
                    op: "adam",
                    dim: "parameter length",
                    expected: self.m[i].len(),
                    actual: p.len(),
                });
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let c1 = T::from_f64(1.0 - self.beta1);
        let c2 = T::from_f64(1.0 - self.beta2);
        let bias1 = T::from_f64(1.0 / (1.0 - self.beta1.powi(t)));
        let bias2 = T::from_f64(1.0 / (1.0 - self.beta2.powi(t)));
        let lr = T::from_f64(lr);
        let eps = T::from_f64(self.eps_opt);

        for (i, p) in params.iter_mut().enumerate() {
            let Some(grad) = p.grad.take() else {
                // no gradient recorded: treat as zero
                for (m, v) in self.m[i].iter_mut().zip(self.v[i].iter_mut()) {
                    *m = b1 * *m;
                    *v = b2 * *v;
                }
                apply(p.data_mut(), &self.m[i], &self.v[i], lr, bias1, bias2, eps);
                continue;
            };
            for ((m, v), &g) in self.m[i].iter_mut().zip(self.v[i].iter_mut()).zip(&grad) {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
            }
            apply(p.data_mut(), &self.m[i], &self.v[i], lr, bias1, bias2, eps);
            p.grad = Some(grad);
            if !p.is_finite() {
                return Err(NnError::NonFinite { op: "adam" });
            }
        }
        Ok(())
    }
}

fn apply<T: Element>(data: &mut [T], m: &[T], v: &[T], lr: T, bias1: T, bias2: T, eps: T) {
    for ((x, &m), &v) in data.iter_mut().zip(m).zip(v) {
        let m_hat = m * bias1;
        let v_hat = v * bias2;
        *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64], grad: &[f64]) -> Tensor<f64> {
        let mut t = Tensor::from_f64(&[values.len()], values).unwrap();
        t.set_grad(grad.to_vec()).unwrap();
        t
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = param(&[1.0, -2.0, 0.5], &[0.0; 3]);
        let before = p.data().to_vec();
        let mut adam = AdamState::<f64>::default();
        for _ in 0..25 {
            adam.step(&mut [&mut p], 0.05).unwrap();
        }
        assert_eq!(p.data(), before.as_slice());
        assert_eq!(adam.step_count, 25);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = param(&[0.0, 0.0, 0.0], &[3.0, -0.01, 250.0]);
        let mut adam = AdamState::<f64>::default();
        adam.step(&mut [&mut p], 0.05).unwrap();
        // m_hat = g and v_hat = g^2 after one step, so |dx| = lr * |g| / (|g| + eps)
        for (&x, &g) in p.data().iter().zip(&[3.0f64, -0.01, 250.0]) {
            let expect = -0.05 * g / (g.abs() + 1e-8);
            assert!((x - expect).abs() < 1e-15);
            assert!((x.abs() - 0.05).abs() < 1e-6);
        }
    }

    #[test]
    fn repeated_identical_gradients_accumulate_moments() {
        let mut p = param(&[0.0], &[1.0]);
        let mut adam = AdamState::<f64>::default();
        adam.step(&mut [&mut p], 0.1).unwrap();
        let d1 = p.data()[0];
        adam.step(&mut [&mut p], 0.1).unwrap();
        let d2 = p.data()[0] - d1;
        // m2 = (1 - b1^2) g, v2 = (1 - b2^2) g^2
        assert!((adam.m[0][0] - 0.19).abs() < 1e-15);
        assert!((adam.v[0][0] - 0.001999).abs() < 1e-15);
        assert_eq!(adam.step_count, 2);
        // bias correction makes m_hat = g and v_hat = g^2 for a constant g,
        // so both displacements equal -lr * g / (|g| + eps)
        let expect = -0.1 / (1.0 + 1e-8);
        assert!((d1 - expect).abs() < 1e-15 && (d2 - expect).abs() < 1e-12);

        // a sign flip on the second call shrinks the step via the first moment
        let mut q = param(&[0.0], &[1.0]);
        let mut adam = AdamState::<f64>::default();
        adam.step(&mut [&mut q], 0.1).unwrap();
        q.set_grad(vec![-1.0]).unwrap();
        let before = q.data()[0];
        adam.step(&mut [&mut q], 0.1).unwrap();
        let m_hat = (0.9 * 0.1 - 0.1) / (1.0 - 0.81);
        let v_hat = 0.001999 / (1.0 - 0.999f64.powi(2));
        let expect = -0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((q.data()[0] - before - expect).abs() < 1e-12);
    }

    #[test]
    fn variance_stays_non_negative() {
        let mut p = param(&[1.0, 2.0], &[-5.0, 0.3]);
        let mut adam = AdamState::<f64>::default();
        adam.step(&mut [&mut p], 0.01).unwrap();
        assert!(adam.v.iter().flatten().all(|&v| v >= 0.0));
    }

    #[test]
    fn shape_change_is_rejected() {
        let mut p = param(&[1.0, 2.0], &[0.0, 0.0]);
        let mut adam = AdamState::<f64>::default();
        adam.step(&mut [&mut p], 0.01).unwrap();
        let mut q = param(&[1.0], &[0.0]);
        assert!(adam.step(&mut [&mut q], 0.01).is_err());
    }
}
