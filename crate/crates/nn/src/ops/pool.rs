//! Max and global average pooling.

use crate::error::{invalid, NnError, Result};
use crate::ops::conv::conv_out_dim;
use crate::tensor::{Element, Tensor};

/// Max pooling output plus the flat input index that won each window.
pub struct MaxPoolOutput<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// Windowed max over each plane; padded cells never win.
pub fn maxpool2d_forward<T: Element>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<MaxPoolOutput<T>> {
    if kernel == 0 || stride == 0 {
        return Err(invalid("maxpool2d", "kernel and stride must be positive"));
    }
    if padding >= kernel {
        return Err(invalid(
            "maxpool2d",
            format!("padding {padding} must be smaller than kernel {kernel}"),
        ));
    }
    let (b, c, h, w) = input.dims4("maxpool2d")?;
    let ho = conv_out_dim(h, kernel, stride, padding).ok_or(NnError::ShapeMismatch {
        op: "maxpool2d",
        dim: "padded height",
        expected: kernel,
        actual: h + 2 * padding,
    })?;
    let wo = conv_out_dim(w, kernel, stride, padding).ok_or(NnError::ShapeMismatch {
        op: "maxpool2d",
        dim: "padded width",
        expected: kernel,
        actual: w + 2 * padding,
    })?;
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut argmax = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            let y0 = (oy * stride) as isize - padding as isize;
            let ys = y0.max(0) as usize..((y0 + kernel as isize).min(h as isize)) as usize;
            for ox in 0..wo {
                let x0 = (ox * stride) as isize - padding as isize;
                let xs = x0.max(0) as usize..((x0 + kernel as isize).min(w as isize)) as usize;
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for iy in ys.clone() {
                    for ix in xs.clone() {
                        let idx = base + iy * w + ix;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok(MaxPoolOutput {
        output: Tensor::new(&[b, c, ho, wo], out)?,
        argmax,
    })
}

pub fn maxpool2d_backward<T: Element>(grad_out: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &idx) in grad_out.iter().zip(argmax) {
        dx[idx] += g;
    }
    dx
}

/// Mean over each `H x W` plane: `B x C x H x W -> B x C`.
pub fn global_avgpool_forward<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4("global_avgpool")?;
    let plane = h * w;
    let inv = T::one() / T::from_f64(plane as f64);
    let out = input
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[b, c], out)
}

pub fn global_avgpool_backward<T: Element>(grad_out: &[T], input_shape: &[usize]) -> Vec<T> {
    let plane = input_shape[2] * input_shape[3];
    let inv = T::one() / T::from_f64(plane as f64);
    grad_out
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, plane))
        .collect()
}
