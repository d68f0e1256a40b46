//! Valid (unpadded) pooling: output side is `(H − size) / stride + 1`.

use crate::error::{GradError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn pooled(h: usize, size: usize, stride: usize) -> Result<usize> {
    if h < size {
        return Err(GradError::Shape(format!("pool window {size} larger than input side {h}")));
    }
    Ok((h - size) / stride + 1)
}

pub(crate) fn avg_pool_forward<T: Scalar>(x: &Tensor<T>, size: usize, stride: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (pooled(h, size, stride)?, pooled(w, size, stride)?);
    let scale = T::one() / T::from_usize(size * size).unwrap();
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let sp = &src[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = T::zero();
                for a in 0..size {
                    let row = &sp[(i * stride + a) * w + j * stride..];
                    for &v in &row[..size] {
                        acc += v;
                    }
                }
                dst[(p * ho + i) * wo + j] = acc * scale;
            }
        }
    }
    Ok(out)
}

pub(crate) fn avg_pool_backward<T: Scalar>(
    x: &Tensor<T>,
    size: usize,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (pooled(h, size, stride)?, pooled(w, size, stride)?);
    grad_out.expect_shape(&[n, c, ho, wo])?;
    let scale = T::one() / T::from_usize(size * size).unwrap();
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let g = grad_out.data();
    let d = dx.data_mut();
    for p in 0..n * c {
        let dp = &mut d[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let gv = g[(p * ho + i) * wo + j] * scale;
                for a in 0..size {
                    for b in 0..size {
                        dp[(i * stride + a) * w + j * stride + b] += gv;
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Returns the pooled tensor and the flat input index chosen for each output.
/// Ties go to the first maximum in row-major window order.
pub(crate) fn max_pool_forward<T: Scalar>(
    x: &Tensor<T>,
    size: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (pooled(h, size, stride)?, pooled(w, size, stride)?);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let mut arg = vec![0usize; n * c * ho * wo];
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let base = p * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + i * stride * w + j * stride;
                for a in 0..size {
                    for b in 0..size {
                        let idx = base + (i * stride + a) * w + j * stride + b;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                let o = (p * ho + i) * wo + j;
                dst[o] = src[best];
                arg[o] = best;
            }
        }
    }
    Ok((out, arg))
}

pub(crate) fn scatter_argmax<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(GradError::Shape("argmax cache does not match gradient".into()));
    }
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    Ok(dx)
}

/// `[N, C, H, W] → [N, C]`.
pub(crate) fn global_max_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut out = Tensor::zeros([n, c]);
    let mut arg = Vec::with_capacity(n * c);
    for p in 0..n * c {
        let sp = &x.data()[p * plane..(p + 1) * plane];
        let mut best = 0;
        for (i, &v) in sp.iter().enumerate() {
            if v > sp[best] {
                best = i;
            }
        }
        out.data_mut()[p] = sp[best];
        arg.push(p * plane + best);
    }
    Ok((out, arg))
}

/// Smallest gap between the winning value and any other value in its window.
/// Used by gradient checks to detect max-pool ties.
pub(crate) fn max_pool_min_gap<T: Scalar>(x: &Tensor<T>, size: usize, stride: usize) -> Result<T> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (pooled(h, size, stride)?, pooled(w, size, stride)?);
    let src = x.data();
    let mut gap = T::infinity();
    for p in 0..n * c {
        let base = p * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut vals: Vec<T> = Vec::with_capacity(size * size);
                for a in 0..size {
                    for b in 0..size {
                        vals.push(src[base + (i * stride + a) * w + j * stride + b]);
                    }
                }
                gap = gap.min(top_two_gap(&vals));
            }
        }
    }
    Ok(gap)
}

pub(crate) fn global_max_min_gap<T: Scalar>(x: &Tensor<T>) -> Result<T> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut gap = T::infinity();
    for p in 0..n * c {
        gap = gap.min(top_two_gap(&x.data()[p * plane..(p + 1) * plane]));
    }
    Ok(gap)
}

fn top_two_gap<T: Scalar>(vals: &[T]) -> T {
    if vals.len() < 2 {
        return T::infinity();
    }
    let mut first = T::neg_infinity();
    let mut second = T::neg_infinity();
    for &v in vals {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    first - second
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_pool_of_constant_is_constant() {
        let x = Tensor::<f32>::full([1, 2, 8, 8], 3.5);
        let y = avg_pool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn max_pool_picks_window_maximum() {
        let x = Tensor::<f64>::new([1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 1.0]).unwrap();
        let (y, arg) = max_pool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0]);
        assert_eq!(arg, vec![1, 6]);
        let dx = scatter_argmax(x.shape(), &arg, &Tensor::new([1, 1, 1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn global_max_reduces_planes() {
        let x = Tensor::<f32>::from_fn([2, 3, 2, 2], |i| (i % 5) as f32);
        let (y, _) = global_max_forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.data(), &[3.0, 4.0, 4.0, 4.0, 4.0, 3.0]);
    }

    #[test]
    fn tie_gap_detects_equal_values() {
        let x = Tensor::<f64>::new([1, 1, 2, 2], vec![1.0, 1.0, 0.0, 0.5]).unwrap();
        assert_eq!(max_pool_min_gap(&x, 2, 2).unwrap(), 0.0);
    }
}
