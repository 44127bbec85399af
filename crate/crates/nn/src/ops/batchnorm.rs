//! Per-channel batch normalization over NCHW tensors.
//!
//! Train mode normalizes with the population (biased) batch variance; the
//! running variance is tracked with the unbiased estimate.

use crate::error::{invalid, NnError, Result};
use crate::tensor::{Element, Tensor};
use crate::Mode;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Learnable affine parameters and running statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    /// `None` until the first train-mode pass (or a checkpoint load).
    pub running_mean: Option<Tensor<T>>,
    pub running_var: Option<Tensor<T>>,
    pub eps: f64,
    pub momentum: f64,
    pub mode: Mode,
}

/// Statistics of one training batch, used to update running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
    pub count: usize,
}

/// Values retained from a train-mode forward pass for backward.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

impl<T: Element> BatchNormParams<T> {
    /// `gamma = 1`, `beta = 0`, no running statistics yet.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: None,
            running_var: None,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            mode: Mode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes `input` according to `self.mode`; train mode also folds
    /// the batch statistics into the running estimates.
    pub fn forward(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        match self.mode {
            Mode::Train => {
                let (out, _, stats) = batchnorm_train(input, &self.gamma, &self.beta, self.eps)?;
                self.update_running(&stats);
                Ok(out)
            }
            Mode::Eval => {
                let (mean, var) = self.running()?;
                Ok(batchnorm_eval(input, &self.gamma, &self.beta, mean, var, self.eps)?.0)
            }
        }
    }

    pub fn running(&self) -> Result<(&[T], &[T])> {
        match (&self.running_mean, &self.running_var) {
            (Some(m), Some(v)) => Ok((m.data(), v.data())),
            _ => Err(NnError::UninitializedRunningStats),
        }
    }

    /// Exponential moving average with `self.momentum` weight on the batch.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let c = self.channels();
        let m = T::from_f64(self.momentum);
        let keep = T::one() - m;
        let correction = if stats.count > 1 {
            T::from_f64(stats.count as f64 / (stats.count - 1) as f64)
        } else {
            T::one()
        };
        let rm = self.running_mean.get_or_insert_with(|| Tensor::zeros(&[c]));
        for (r, &b) in rm.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        let rv = self
            .running_var
            .get_or_insert_with(|| Tensor::full(&[c], T::one()));
        for (r, &b) in rv.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b * correction;
        }
    }
}

fn check_channels<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = input.dims4("batchnorm")?;
    for (t, dim) in [(gamma, "gamma length"), (beta, "beta length")] {
        if t.len() != c {
            return Err(NnError::ShapeMismatch {
                op: "batchnorm",
                dim,
                expected: c,
                actual: t.len(),
            });
        }
    }
    Ok((b, c, h * w))
}

/// Train-mode normalization using batch statistics.
pub fn batchnorm_train<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BnCache<T>, BatchStats<T>)> {
    if eps <= 0.0 {
        return Err(invalid("batchnorm", "eps must be positive"));
    }
    let (b, c, plane) = check_channels(input, gamma, beta)?;
    let count = b * plane;
    if count < 2 {
        return Err(invalid(
            "batchnorm",
            format!("train mode needs at least 2 values per channel, got {count}"),
        ));
    }
    let x = input.data();
    let n = T::from_f64(count as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for bi in 0..b {
            s += x[(bi * c + ch) * plane..][..plane].iter().copied().sum::<T>();
        }
        let mu = s / n;
        let mut ss = T::zero();
        for bi in 0..b {
            for &v in &x[(bi * c + ch) * plane..][..plane] {
                ss += (v - mu) * (v - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = ss / n;
    }
    let eps_t = T::from_f64(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            let (mu, is, g, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in off..off + plane {
                let xh = (x[i] - mu) * is;
                xhat[i] = xh;
                out[i] = g * xh + bt;
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), out)?,
        BnCache { xhat, inv_std },
        BatchStats { mean, var, count },
    ))
}

/// Eval-mode normalization using fixed statistics; also returns the
/// per-channel inverse standard deviation used.
pub fn batchnorm_eval<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (b, c, plane) = check_channels(input, gamma, beta)?;
    if mean.len() != c || var.len() != c {
        return Err(NnError::ShapeMismatch {
            op: "batchnorm",
            dim: "running statistics length",
            expected: c,
            actual: mean.len().min(var.len()),
        });
    }
    let eps_t = T::from_f64(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            let scale = gamma.data()[ch] * inv_std[ch];
            let shift = beta.data()[ch] - mean[ch] * scale;
            for i in off..off + plane {
                out[i] = x[i] * scale + shift;
            }
        }
    }
    Ok((Tensor::new(input.shape(), out)?, inv_std))
}

pub struct BnGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batchnorm_train_backward<T: Element>(
    shape: &[usize],
    grad_out: &[T],
    gamma: &[T],
    cache: &BnCache<T>,
) -> BnGrads<T> {
    let (b, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let n = T::from_f64((b * plane) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            for i in off..off + plane {
                dbeta[ch] += grad_out[i];
                dgamma[ch] += grad_out[i] * cache.xhat[i];
            }
        }
    }
    // dx = gamma * inv_std / N * (N*dy - sum(dy) - xhat*sum(dy*xhat))
    let mut dx = vec![T::zero(); grad_out.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            let k = gamma[ch] * cache.inv_std[ch] / n;
            for i in off..off + plane {
                dx[i] = k * (n * grad_out[i] - dbeta[ch] - cache.xhat[i] * dgamma[ch]);
            }
        }
    }
    BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

pub fn batchnorm_eval_backward<T: Element>(
    input: &Tensor<T>,
    grad_out: &[T],
    gamma: &[T],
    mean: &[T],
    inv_std: &[T],
) -> BnGrads<T> {
    let shape = input.shape();
    let (b, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let x = input.data();
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            let scale = gamma[ch] * inv_std[ch];
            for i in off..off + plane {
                dx[i] = grad_out[i] * scale;
                dbeta[ch] += grad_out[i];
                dgamma[ch] += grad_out[i] * (x[i] - mean[ch]) * inv_std[ch];
            }
        }
    }
    BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}
