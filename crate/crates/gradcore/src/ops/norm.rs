//! Per-channel batch normalization over `[N, C, ...]` tensors.

use crate::error::{GradError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Batch statistics (training mode only); variance is unbiased.
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub training: bool,
}

fn layout<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(GradError::Shape(format!("batch norm needs [N, C, ...], got {:?}", x.shape())));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    Ok((n, c, x.len() / (n * c)))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
    training: bool,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (n, c, plane) = layout(x)?;
    for p in [gamma, beta, running_mean, running_var] {
        p.expect_shape(&[c])?;
    }
    let count = n * plane;
    if training && count < 2 {
        return Err(GradError::Shape("batch norm in training mode needs at least 2 values per channel".into()));
    }
    let src = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    if training {
        let m = T::from_usize(count).unwrap();
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                let base = (b * c + ch) * plane;
                s += src[base..base + plane].iter().copied().sum::<T>();
            }
            let mu = s / m;
            let mut q = T::zero();
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for &v in &src[base..base + plane] {
                    q += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = q / m;
        }
    } else {
        mean.copy_from_slice(running_mean.data());
        var.copy_from_slice(running_var.data());
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = Tensor::zeros(x.shape().to_vec());
    let mut xhat = vec![T::zero(); x.len()];
    let dst = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let (mu, is, g, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in base..base + plane {
                let xh = (src[i] - mu) * is;
                xhat[i] = xh;
                dst[i] = g * xh + bt;
            }
        }
    }
    let batch_var = if training {
        let m = T::from_usize(count).unwrap();
        var.iter().map(|&v| v * m / (m - T::one())).collect()
    } else {
        Vec::new()
    };
    Ok((
        out,
        NormCache {
            xhat,
            inv_std,
            batch_mean: if training { mean } else { Vec::new() },
            batch_var,
            training,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &NormCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, plane) = layout(x)?;
    grad_out.expect_shape(x.shape())?;
    let g = grad_out.data();
    let mut dgamma = Tensor::zeros([c]);
    let mut dbeta = Tensor::zeros([c]);
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                dgamma.data_mut()[ch] += g[i] * cache.xhat[i];
                dbeta.data_mut()[ch] += g[i];
            }
        }
    }
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let m = T::from_usize(n * plane).unwrap();
    let d = dx.data_mut();
    for ch in 0..c {
        let gm = gamma.data()[ch];
        let is = cache.inv_std[ch];
        if cache.training {
            // dx = γ·σ⁻¹/m · (m·dy − Σdy − x̂·Σ(dy·x̂))
            let (sum_dy, sum_dy_xhat) = (dbeta.data()[ch], dgamma.data()[ch]);
            let k = gm * is / m;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    d[i] = k * (m * g[i] - sum_dy - cache.xhat[i] * sum_dy_xhat);
                }
            }
        } else {
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    d[i] = g[i] * gm * is;
                }
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_output_is_standardized_per_channel() {
        let x = Tensor::<f64>::from_fn([4, 2, 3, 3], |i| (i as f64 * 0.37).sin() * 5.0 + 2.0);
        let ones = Tensor::full([2], 1.0);
        let zeros = Tensor::zeros([2]);
        let (y, cache) = forward(&x, &ones, &zeros, &zeros, &ones, 1e-12, true).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|b| (0..9).map(move |i| (b, i)))
                .map(|(b, i)| y.data()[(b * 2 + ch) * 9 + i])
                .collect();
            let mean = vals.iter().sum::<f64>() / 36.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 36.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8);
        }
        assert_eq!(cache.batch_mean.len(), 2);
    }

    #[test]
    fn inference_uses_running_statistics() {
        let x = Tensor::<f32>::full([1, 1, 2, 2], 3.0);
        let (y, _) = forward(
            &x,
            &Tensor::full([1], 2.0),
            &Tensor::full([1], 1.0),
            &Tensor::full([1], 1.0),
            &Tensor::full([1], 4.0),
            0.0,
            false,
        )
        .unwrap();
        // 2·(3−1)/2 + 1
        assert!(y.data().iter().all(|&v| v == 3.0));
    }
}
