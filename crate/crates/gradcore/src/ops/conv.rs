//! Convolution via im2col + GEMM, and nearest-neighbour 2× upsampling.
//!
//! Weights are `[C_out, C_in, k, k]`, inputs `[N, C_in, H, W]`. Output side is
//! `(H + 2·padding − k) / stride + 1`; `padding = k / 2` with stride 1 gives
//! "same" output for odd kernels.

use crate::error::{GradError, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if h + 2 * padding < kernel || w + 2 * padding < kernel {
            return Err(GradError::Shape(format!(
                "kernel {kernel} larger than padded input {h}x{w} (padding {padding})"
            )));
        }
        Ok(ConvGeom {
            c_in,
            h,
            w,
            kernel,
            stride,
            padding,
            h_out: (h + 2 * padding - kernel) / stride + 1,
            w_out: (w + 2 * padding - kernel) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds one image `[C, H, W]` into `[C·k·k, H_out·W_out]`.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let ncols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for oh in 0..g.h_out {
                    let ih = (oh * s) as isize + ki as isize - p;
                    let out_row = &mut dst[oh * g.w_out..(oh + 1) * g.w_out];
                    if ih < 0 || ih >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, v) in out_row.iter_mut().enumerate() {
                        let iw = (ow * s) as isize + kj as isize - p;
                        *v = if iw < 0 || iw >= g.w as isize { T::zero() } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an image.
fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let ncols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * ncols..(row + 1) * ncols];
                for oh in 0..g.h_out {
                    let ih = (oh * s) as isize + ki as isize - p;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, &v) in src[oh * g.w_out..(oh + 1) * g.w_out].iter().enumerate() {
                        let iw = (ow * s) as isize + kj as isize - p;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, c_in, h, w) = x.dims4()?;
    let (c_out, wc_in, kh, kw) = weight.dims4()?;
    if wc_in != c_in || kh != kw {
        return Err(GradError::Shape(format!(
            "conv weight {:?} incompatible with input {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    let g = ConvGeom::new(c_in, h, w, kh, stride, padding)?;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = Tensor::zeros([n, c_out, g.h_out, g.w_out]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
    let in_stride = c_in * h * w;
    let out_stride = c_out * cols;
    for b in 0..n {
        let xb = &x.data()[b * in_stride..(b + 1) * in_stride];
        let ob = &mut out.data_mut()[b * out_stride..(b + 1) * out_stride];
        let colb: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(&g, xb, &mut col);
            &col
        };
        gemm(c_out, rows, cols, weight.data(), false, colb, false, T::zero(), ob);
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(cols).enumerate() {
                let bv = bias.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (n, c_in, h, w) = x.dims4()?;
    let (c_out, _, k, _) = weight.dims4()?;
    let g = ConvGeom::new(c_in, h, w, k, stride, padding)?;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    grad_out.expect_shape(&[n, c_out, g.h_out, g.w_out])?;

    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dw = Tensor::zeros(weight.shape().to_vec());
    let mut db = has_bias.then(|| Tensor::zeros([c_out]));
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
    let mut dcol = vec![T::zero(); rows * cols];
    let in_stride = c_in * h * w;
    let out_stride = c_out * cols;
    for b in 0..n {
        let xb = &x.data()[b * in_stride..(b + 1) * in_stride];
        let gb = &grad_out.data()[b * out_stride..(b + 1) * out_stride];
        let colb: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(&g, xb, &mut col);
            &col
        };
        // dW += dY · colᵀ
        gemm(c_out, cols, rows, gb, false, colb, true, T::one(), dw.data_mut());
        // dcol = Wᵀ · dY
        let dxb = &mut dx.data_mut()[b * in_stride..(b + 1) * in_stride];
        if g.is_pointwise() {
            gemm(rows, c_out, cols, weight.data(), true, gb, false, T::zero(), dxb);
        } else {
            gemm(rows, c_out, cols, weight.data(), true, gb, false, T::zero(), &mut dcol);
            col2im(&g, &dcol, dxb);
        }
        if let Some(db) = db.as_mut() {
            for (co, chunk) in gb.chunks(cols).enumerate() {
                db.data_mut()[co] += chunk.iter().copied().sum::<T>();
            }
        }
    }
    Ok((dx, dw, db))
}

pub(crate) fn upsample2x_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let sp = &src[p * h * w..(p + 1) * h * w];
        let dp = &mut dst[p * 4 * h * w..(p + 1) * 4 * h * w];
        for i in 0..2 * h {
            for j in 0..2 * w {
                dp[i * 2 * w + j] = sp[(i / 2) * w + j / 2];
            }
        }
    }
    Ok(out)
}

pub(crate) fn upsample2x_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    grad_out.expect_shape(&[n, c, 2 * h, 2 * w])?;
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let src = grad_out.data();
    let dst = dx.data_mut();
    for p in 0..n * c {
        let sp = &src[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dp = &mut dst[p * h * w..(p + 1) * h * w];
        for i in 0..2 * h {
            for j in 0..2 * w {
                dp[(i / 2) * w + j / 2] += sp[i * 2 * w + j];
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor<f64>, wt: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, ci, h, w) = x.dims4().unwrap();
        let (co, _, k, _) = wt.dims4().unwrap();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros([n, co, ho, wo]);
        for b in 0..n {
            for o in 0..co {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for a in 0..k {
                                for d in 0..k {
                                    let ih = (i * stride + a) as isize - pad as isize;
                                    let iw = (j * stride + d) as isize - pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                        acc += x.at4(b, c, ih as usize, iw as usize) * wt.at4(o, c, a, d);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * co + o) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_convolution() {
        let x = Tensor::<f64>::from_fn([2, 3, 7, 6], |i| ((i * 37 % 11) as f64 - 5.0) / 3.0);
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (2, 1, 0), (1, 1, 0), (5, 2, 2)] {
            let wt = Tensor::<f64>::from_fn([4, 3, k, k], |i| ((i * 13 % 7) as f64 - 3.0) / 5.0);
            let got = conv2d_forward(&x, &wt, None, stride, pad).unwrap();
            let want = naive_conv(&x, &wt, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={pad}");
            }
        }
    }

    #[test]
    fn identity_kernel_returns_input() {
        let x = Tensor::<f32>::from_fn([1, 1, 5, 4], |i| i as f32 * 0.25);
        let wt = Tensor::<f32>::new([1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d_forward(&x, &wt, None, 1, 0).unwrap(), x);
        let mut w3 = Tensor::<f32>::zeros([1, 1, 3, 3]);
        w3.data_mut()[4] = 1.0;
        assert_eq!(conv2d_forward(&x, &w3, None, 1, 1).unwrap(), x);
    }

    #[test]
    fn upsample_then_adjoint_sums_blocks() {
        let x = Tensor::<f64>::from_fn([1, 2, 2, 3], |i| i as f64);
        let up = upsample2x_forward(&x).unwrap();
        assert_eq!(up.shape(), &[1, 2, 4, 6]);
        assert_eq!(up.at4(0, 1, 3, 5), x.at4(0, 1, 1, 2));
        let back = upsample2x_backward(&x, &up).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert_eq!(*a, 4.0 * b);
        }
    }
}
