//! 2-D convolution via im2col and GEMM.
//!
//! Columns are built for a chunk of samples at once, laid out as
//! `[C*kh*kw, chunk*Ho*Wo]`, so late stages with tiny spatial extent still
//! feed the GEMM a reasonably wide right-hand side.

use crate::error::{invalid, NnError, Result};
use crate::tensor::{Element, Tensor};

/// Upper bound on the number of im2col elements materialized at once.
const MAX_COL_ELEMS: usize = 1 << 24;

/// Convolution weights plus geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// `(out_ch, in_ch, kh, kw)`
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> ConvParams<T> {
    pub fn new(
        weights: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (o, _, kh, kw) = weights.dims4("conv2d")?;
        if kh != kw {
            return Err(invalid("conv2d", format!("non-square kernel {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        if let Some(b) = &bias {
            if b.len() != o {
                return Err(NnError::ShapeMismatch {
                    op: "conv2d",
                    dim: "bias length",
                    expected: o,
                    actual: b.len(),
                });
            }
        }
        Ok(Self {
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_forward(
            input,
            &self.weights,
            self.bias.as_ref(),
            self.stride,
            self.padding,
        )
    }
}

/// Output extent of a sliding window: `floor((n + 2p - k) / s) + 1`.
pub fn conv_out_dim(n: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || n + 2 * padding < kernel {
        return None;
    }
    Some((n + 2 * padding - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [batch, in_ch, h, w] = *input else {
            return Err(NnError::Rank {
                op: "conv2d",
                expected: 4,
                actual: input.to_vec(),
            });
        };
        let [out_ch, w_in, kh, kw] = *weight else {
            return Err(NnError::Rank {
                op: "conv2d",
                expected: 4,
                actual: weight.to_vec(),
            });
        };
        if w_in != in_ch {
            return Err(NnError::ShapeMismatch {
                op: "conv2d",
                dim: "input channels",
                expected: w_in,
                actual: in_ch,
            });
        }
        if kh != kw {
            return Err(invalid("conv2d", format!("non-square kernel {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        let ho = conv_out_dim(h, kh, stride, padding).ok_or(NnError::ShapeMismatch {
            op: "conv2d",
            dim: "padded height",
            expected: kh,
            actual: h + 2 * padding,
        })?;
        let wo = conv_out_dim(w, kw, stride, padding).ok_or(NnError::ShapeMismatch {
            op: "conv2d",
            dim: "padded width",
            expected: kw,
            actual: w + 2 * padding,
        })?;
        Ok(Self {
            batch,
            in_ch,
            h,
            w,
            out_ch,
            k: kh,
            stride,
            padding,
            ho,
            wo,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn chunk(&self) -> usize {
        (MAX_COL_ELEMS / (self.col_rows() * self.out_plane()).max(1)).clamp(1, self.batch)
    }
}

/// Fills `cols` (`[C*k*k, n*Ho*Wo]`) from samples `b0..b0+n`.
fn im2col<T: Element>(x: &[T], g: &Geometry, b0: usize, n: usize, cols: &mut [T]) {
    let plane = g.out_plane();
    let ncols = n * plane;
    let in_plane = g.h * g.w;
    for c in 0..g.in_ch {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for s in 0..n {
                    let src = &x[((b0 + s) * g.in_ch + c) * in_plane..][..in_plane];
                    let dst = &mut dst_row[s * plane..(s + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        if iy < 0 || iy >= g.h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            *d = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                srow[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into the input-gradient buffer.
fn col2im<T: Element>(cols: &[T], g: &Geometry, b0: usize, n: usize, dx: &mut [T]) {
    let plane = g.out_plane();
    let ncols = n * plane;
    let in_plane = g.h * g.w;
    for c in 0..g.in_ch {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for s in 0..n {
                    let dst = &mut dx[((b0 + s) * g.in_ch + c) * in_plane..][..in_plane];
                    let src = &src_row[s * plane..(s + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, &v) in src[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.w as isize {
                                drow[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of an NCHW batch with zero padding.
pub fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input.shape(), weight.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.len() != g.out_ch {
            return Err(NnError::ShapeMismatch {
                op: "conv2d",
                dim: "bias length",
                expected: g.out_ch,
                actual: b.len(),
            });
        }
    }
    let plane = g.out_plane();
    let rows = g.col_rows();
    let chunk = g.chunk();
    let mut out = vec![T::zero(); g.batch * g.out_ch * plane];
    let mut cols = vec![T::zero(); rows * chunk * plane];
    let mut tmp = vec![T::zero(); g.out_ch * chunk * plane];
    let x = input.data();
    let w = weight.data();

    let mut b0 = 0;
    while b0 < g.batch {
        let n = chunk.min(g.batch - b0);
        let ncols = n * plane;
        im2col(x, &g, b0, n, &mut cols[..rows * ncols]);
        T::gemm(
            g.out_ch,
            rows,
            ncols,
            T::one(),
            w,
            rows as isize,
            1,
            &cols[..rows * ncols],
            ncols as isize,
            1,
            T::zero(),
            &mut tmp[..g.out_ch * ncols],
            ncols as isize,
            1,
        );
        // [O, n*P] -> [n, O, P]
        for s in 0..n {
            for o in 0..g.out_ch {
                let dst = &mut out[((b0 + s) * g.out_ch + o) * plane..][..plane];
                dst.copy_from_slice(&tmp[o * ncols + s * plane..][..plane]);
                if let Some(b) = bias {
                    let bv = b.data()[o];
                    dst.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        b0 += n;
    }
    Tensor::new(&[g.batch, g.out_ch, g.ho, g.wo], out)
}

/// Gradients of a convolution with respect to its input, weights and bias.
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &[T],
    stride: usize,
    padding: usize,
    need_input_grad: bool,
    has_bias: bool,
) -> Result<ConvGrads<T>> {
    let g = Geometry::new(input.shape(), weight.shape(), stride, padding)?;
    let plane = g.out_plane();
    if grad_out.len() != g.batch * g.out_ch * plane {
        return Err(NnError::ShapeMismatch {
            op: "conv2d_backward",
            dim: "output gradient length",
            expected: g.batch * g.out_ch * plane,
            actual: grad_out.len(),
        });
    }
    let rows = g.col_rows();
    let chunk = g.chunk();
    let x = input.data();
    let w = weight.data();
    let mut dw = vec![T::zero(); weight.len()];
    let mut dx = need_input_grad.then(|| vec![T::zero(); input.len()]);
    let mut cols = vec![T::zero(); rows * chunk * plane];
    let mut dy = vec![T::zero(); g.out_ch * chunk * plane];

    let mut b0 = 0;
    while b0 < g.batch {
        let n = chunk.min(g.batch - b0);
        let ncols = n * plane;
        // [n, O, P] -> [O, n*P]
        for s in 0..n {
            for o in 0..g.out_ch {
                dy[o * ncols + s * plane..][..plane]
                    .copy_from_slice(&grad_out[((b0 + s) * g.out_ch + o) * plane..][..plane]);
            }
        }
        im2col(x, &g, b0, n, &mut cols[..rows * ncols]);
        // dW[O, R] += dY[O, N] * cols^T[N, R]
        T::gemm(
            g.out_ch,
            ncols,
            rows,
            T::one(),
            &dy[..g.out_ch * ncols],
            ncols as isize,
            1,
            &cols[..rows * ncols],
            1,
            ncols as isize,
            T::one(),
            &mut dw,
            rows as isize,
            1,
        );
        if let Some(dx) = dx.as_mut() {
            // dcols[R, N] = W^T[R, O] * dY[O, N]
            T::gemm(
                rows,
                g.out_ch,
                ncols,
                T::one(),
                w,
                1,
                rows as isize,
                &dy[..g.out_ch * ncols],
                ncols as isize,
                1,
                T::zero(),
                &mut cols[..rows * ncols],
                ncols as isize,
                1,
            );
            col2im(&cols[..rows * ncols], &g, b0, n, dx);
        }
        b0 += n;
    }

    let db = has_bias.then(|| {
        let mut db = vec![T::zero(); g.out_ch];
        for s in 0..g.batch {
            for (o, acc) in db.iter_mut().enumerate() {
                let sum: T = grad_out[(s * g.out_ch + o) * plane..][..plane]
                    .iter()
                    .copied()
                    .sum();
                *acc += sum;
            }
        }
        db
    });
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop convolution used as an oracle for the im2col path.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let (b, c, h, wd) = x.dims4("t").unwrap();
        let (o, _, k, _) = w.dims4("t").unwrap();
        let ho = conv_out_dim(h, k, stride, pad).unwrap();
        let wo = conv_out_dim(wd, k, stride, pad).unwrap();
        let mut out = vec![0.0; b * o * ho * wo];
        for bi in 0..b {
            for oi in 0..o {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for i in 0..k {
                                for j in 0..k {
                                    let iy = (y * stride + i) as isize - pad as isize;
                                    let ix = (xx * stride + j) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        acc += x.data()[((bi * c + ci) * h + iy as usize) * wd
                                            + ix as usize]
                                            * w.data()[((oi * c + ci) * k + i) * k + j];
                                    }
                                }
                            }
                        }
                        out[((bi * o + oi) * ho + y) * wo + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) * scale).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn stem_shape() {
        let x = Tensor::<f32>::zeros(&[1, 3, 256, 256]);
        let w = Tensor::<f32>::zeros(&[64, 3, 7, 7]);
        let y = conv2d_forward(&x, &w, None, 2, 3).unwrap();
        assert_eq!(y.shape(), &[1, 64, 128, 128]);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d_forward(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn diagonal_kernel_dot_product() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv2d_forward(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn matches_direct_convolution() {
        for &(stride, pad, k) in &[(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 3, 7), (2, 0, 1)] {
            let x = ramp(&[2, 3, 9, 8], 0.1);
            let w = ramp(&[4, 3, k, k], 0.05);
            let y = conv2d_forward(&x, &w, None, stride, pad).unwrap();
            let expect = naive(&x, &w, stride, pad);
            for (a, b) in y.data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}");
            }
        }
    }

    #[test]
    fn bias_is_added_per_channel() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::<f64>::zeros(&[2, 1, 1, 1]);
        let b = Tensor::<f64>::from_f64(&[2], &[1.5, -2.0]).unwrap();
        let y = conv2d_forward(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.data(), &[1.5, 1.5, 1.5, 1.5, -2.0, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let x = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
        let w = Tensor::<f32>::zeros(&[4, 2, 3, 3]);
        match conv2d_forward(&x, &w, None, 1, 1).unwrap_err() {
            NnError::ShapeMismatch { dim, expected, actual, .. } => {
                assert_eq!(dim, "input channels");
                assert_eq!((expected, actual), (2, 3));
            }
            e => panic!("unexpected {e:?}"),
        }
        let w = Tensor::<f32>::zeros(&[4, 3, 7, 7]);
        assert!(conv2d_forward(&Tensor::zeros(&[1, 3, 2, 2]), &w, None, 1, 0).is_err());
    }

    #[test]
    fn batched_matches_per_sample() {
        let x = ramp(&[3, 3, 64, 64], 0.01);
        let w = ramp(&[8, 3, 7, 7], 0.01);
        let y = conv2d_forward(&x, &w, None, 2, 3).unwrap();
        for s in 0..3 {
            let xs = Tensor::new(&[1, 3, 64, 64], x.data()[s * 3 * 4096..(s + 1) * 3 * 4096].to_vec())
                .unwrap();
            let ys = conv2d_forward(&xs, &w, None, 2, 3).unwrap();
            assert_eq!(&y.data()[s * ys.len()..(s + 1) * ys.len()], ys.data());
        }
    }
}
