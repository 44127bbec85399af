//! Reverse-mode differentiation over a recorded list of primitive ops.
//!
//! Every forward call appends a node holding its output value and whatever
//! it needs for the backward rule. Parameters enter as borrowed leaves so a
//! training step never copies the model.

use std::borrow::Cow;

use crate::error::{invalid, NnError, Result};
use crate::ops::batchnorm::{self, BatchStats, BnCache};
use crate::ops::{activation, conv, linear, loss, pool};
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Sum {
        input: Var,
    },
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
        row_weights: Vec<T>,
    },
}

struct Node<'a, T: Element> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a, T: Element> {
    nodes: Vec<Node<'a, T>>,
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a, T: Element> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        value.require_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Owned leaf, e.g. an input batch.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad, "input")
    }

    /// Borrowed trainable leaf.
    pub fn param(&mut self, value: &'a Tensor<T>) -> Result<Var> {
        self.push(Cow::Borrowed(value), Op::Leaf, true, "param")
    }

    /// Borrowed leaf that never receives a gradient.
    pub fn constant(&mut self, value: &'a Tensor<T>) -> Result<Var> {
        self.push(Cow::Borrowed(value), Op::Leaf, false, "constant")
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = conv::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.grad_flag(&deps);
        self.push(
            Cow::Owned(out),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
            "conv2d",
        )
    }

    pub fn maxpool2d(&mut self, input: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let out = pool::maxpool2d_forward(self.value(input), kernel, stride, padding)?;
        let rg = self.grad_flag(&[input]);
        self.push(
            Cow::Owned(out.output),
            Op::MaxPool2d {
                input,
                argmax: out.argmax,
            },
            rg,
            "maxpool2d",
        )
    }

    pub fn global_avgpool(&mut self, input: Var) -> Result<Var> {
        let out = pool::global_avgpool_forward(self.value(input))?;
        let rg = self.grad_flag(&[input]);
        self.push(Cow::Owned(out), Op::GlobalAvgPool { input }, rg, "global_avgpool")
    }

    /// Train-mode batchnorm; returns the batch statistics so the caller can
    /// update its running estimates.
    pub fn batchnorm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let (out, cache, stats) =
            batchnorm::batchnorm_train(self.value(input), self.value(gamma), self.value(beta), eps)?;
        let rg = self.grad_flag(&[input, gamma, beta]);
        let v = self.push(
            Cow::Owned(out),
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                cache,
            },
            rg,
            "batchnorm",
        )?;
        Ok((v, stats))
    }

    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (out, inv_std) = batchnorm::batchnorm_eval(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        let rg = self.grad_flag(&[input, gamma, beta]);
        self.push(
            Cow::Owned(out),
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
            rg,
            "batchnorm",
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = activation::relu_forward(self.value(input));
        let rg = self.grad_flag(&[input]);
        self.push(Cow::Owned(out), Op::Relu { input }, rg, "relu")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(invalid(
                "add",
                format!("shapes {:?} and {:?} differ", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.grad_flag(&[a, b]);
        self.push(Cow::Owned(out), Op::Add { a, b }, rg, "add")
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = linear::linear_forward(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.grad_flag(&[input, weight, bias]);
        self.push(Cow::Owned(out), Op::Linear { input, weight, bias }, rg, "linear")
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s: T = self.value(input).data().iter().copied().sum();
        let rg = self.grad_flag(&[input]);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::Sum { input }, rg, "sum")
    }

    /// Scalar `sum_i w_i * x_i` with fixed weights.
    pub fn weighted_sum(&mut self, input: Var, weights: Vec<T>) -> Result<Var> {
        let x = self.value(input);
        if weights.len() != x.len() {
            return Err(NnError::ShapeMismatch {
                op: "weighted_sum",
                dim: "weight count",
                expected: x.len(),
                actual: weights.len(),
            });
        }
        let s: T = x.data().iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        let rg = self.grad_flag(&[input]);
        self.push(Cow::Owned(Tensor::scalar(s)), Op::WeightedSum { input, weights }, rg, "weighted_sum")
    }

    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], class_weights: &[f64]) -> Result<Var> {
        let out = loss::weighted_cross_entropy(self.value(logits), labels, class_weights)?;
        let rg = self.grad_flag(&[logits]);
        self.push(
            Cow::Owned(Tensor::scalar(out.loss)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: out.probs,
                row_weights: out.row_weights,
            },
            rg,
            "weighted_cross_entropy",
        )
    }

    /// Propagates `d loss / d node` back to every leaf that requires a
    /// gradient. `loss` must be a scalar node on this tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(NnError::BackwardBeforeForward);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let mut acc = |v: Var, d: Vec<T>| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(d).for_each(|(e, x)| *e += x),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let cg = conv::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    *stride,
                    *padding,
                    self.wants(*input),
                    bias.is_some(),
                )?;
                if let Some(dx) = cg.input {
                    acc(*input, dx);
                }
                acc(*weight, cg.weight);
                if let (Some(b), Some(db)) = (bias, cg.bias) {
                    acc(*b, db);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let n = self.value(*input).len();
                acc(*input, pool::maxpool2d_backward(g, argmax, n));
            }
            Op::GlobalAvgPool { input } => {
                acc(*input, pool::global_avgpool_backward(g, self.value(*input).shape()));
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                cache,
            } => {
                let bg = batchnorm::batchnorm_train_backward(
                    self.value(*input).shape(),
                    g,
                    self.value(*gamma).data(),
                    cache,
                );
                acc(*input, bg.input);
                acc(*gamma, bg.gamma);
                acc(*beta, bg.beta);
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let bg = batchnorm::batchnorm_eval_backward(
                    self.value(*input),
                    g,
                    self.value(*gamma).data(),
                    mean,
                    inv_std,
                );
                acc(*input, bg.input);
                acc(*gamma, bg.gamma);
                acc(*beta, bg.beta);
            }
            Op::Relu { input } => {
                acc(*input, activation::relu_backward(node.value.data(), g));
            }
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Linear { input, weight, bias } => {
                let lg = linear::linear_backward(self.value(*input), self.value(*weight), g);
                acc(*input, lg.input);
                acc(*weight, lg.weights);
                acc(*bias, lg.bias);
            }
            Op::Sum { input } => {
                acc(*input, vec![g[0]; self.value(*input).len()]);
            }
            Op::WeightedSum { input, weights } => {
                acc(*input, weights.iter().map(|&w| w * g[0]).collect());
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                row_weights,
            } => {
                acc(
                    *logits,
                    loss::weighted_cross_entropy_backward(probs, row_weights, labels, g[0]),
                );
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.0, 0.0, 5.0, -1.0]).unwrap(), true).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn dead_relu_units_have_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_f64(&[4], &[-1.0, -0.1, -3.0, -2.0]).unwrap(), true).unwrap();
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn backward_on_empty_tape_fails() {
        let tape = Tape::<f32>::new();
        assert_eq!(tape.backward(Var(0)).err(), Some(NnError::BackwardBeforeForward));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), true).unwrap();
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let err = tape.input(Tensor::from_f64(&[1], &[f64::NAN]).unwrap(), false).unwrap_err();
        assert_eq!(err, NnError::NonFinite { op: "input" });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let w = Tensor::<f64>::from_f64(&[2, 1], &[1.0, 1.0]).unwrap();
        let b = Tensor::<f64>::zeros(&[1]);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_f64(&[1, 2], &[3.0, 4.0]).unwrap(), false).unwrap();
        let wv = tape.param(&w).unwrap();
        let bv = tape.constant(&b).unwrap();
        let y = tape.linear(x, wv, bv).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_none());
        assert!(g.get(bv).is_none());
        assert_eq!(g.get(wv).unwrap(), &[3.0, 4.0]);
    }
}
