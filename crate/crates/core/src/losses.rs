//! Training objectives. Each loss acts on a single item and returns the
//! value together with its gradient with respect to the network output
//! (logits unless noted). Batched training averages per-item values.

use gradcore::ops::sigmoid;
use gradcore::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StenosisError};
use crate::geometry::PixelPoint;

/// `log(1 + e^x)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(StenosisError::invalid(format!(
            "{what}: shape {:?} does not match {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_finite<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<()> {
    if x.all_finite() {
        Ok(())
    } else {
        Err(StenosisError::invalid(format!("{what}: non-finite logits")))
    }
}

fn check_binary<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<()> {
    if x.data().iter().all(|&v| v == T::zero() || v == T::one()) {
        Ok(())
    } else {
        Err(StenosisError::invalid(format!("{what} must be binary")))
    }
}

/// Weighted sigmoid cross-entropy over a confidence grid:
/// `−Σ [w_pos·y·log σ(o) + (1−y)·log(1−σ(o))]`.
pub fn weighted_grid_bce<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>, w_pos: f64) -> Result<(T, Tensor<T>)> {
    check_pair(logits, labels, "grid loss")?;
    check_finite(logits, "grid loss")?;
    let w = T::from_f64_lossy(w_pos);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (&o, &y) in logits.data().iter().zip(labels.data()) {
        loss += w * y * softplus(-o) + (T::one() - y) * softplus(o);
        let s = sigmoid(o);
        grad.push(-w * y * (T::one() - s) + (T::one() - y) * s);
    }
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Soft dice loss `−(2Σuv + eps)/(Σu + Σv + eps)` on probabilities; the
/// gradient is with respect to `pred`.
pub fn dice_loss<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>, eps: f64) -> Result<(T, Tensor<T>)> {
    check_pair(pred, truth, "dice loss")?;
    let e = T::from_f64_lossy(eps);
    let two = T::from_f64_lossy(2.0);
    let inter: T = pred.data().iter().zip(truth.data()).map(|(&u, &v)| u * v).sum();
    let num = two * inter + e;
    let den = pred.sum() + truth.sum() + e;
    let grad = truth.map(|v| -(two * v) / den + num / (den * den));
    Ok((-num / den, grad))
}

/// [`dice_loss`] applied to `sigmoid(logits)`, differentiated through the sigmoid.
pub fn dice_loss_logits<T: Scalar>(logits: &Tensor<T>, truth: &Tensor<T>, eps: f64) -> Result<(T, Tensor<T>)> {
    check_finite(logits, "dice loss")?;
    let probs = logits.map(sigmoid);
    let (loss, mut grad) = dice_loss(&probs, truth, eps)?;
    for (g, &p) in grad.data_mut().iter_mut().zip(probs.data()) {
        *g *= p * (T::one() - p);
    }
    Ok((loss, grad))
}

/// Morphological weighting constants. `sigma_bell` is the Gaussian width
/// in pixels. With `stop_weight_gradient` the `α·o` term is treated as a
/// constant during differentiation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MwceParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub sigma_bell: f64,
    pub stop_weight_gradient: bool,
}

impl Default for MwceParams {
    fn default() -> Self {
        MwceParams { alpha: 3.0, beta: 64.0, gamma: 128.0, delta: 10.0, sigma_bell: 15.0, stop_weight_gradient: false }
    }
}

impl MwceParams {
    /// Nonnegative constants and a positive bell width. Zero weights are
    /// allowed so the loss can degenerate to plain cross-entropy.
    pub fn validate(&self) -> Result<()> {
        let vals = [self.alpha, self.beta, self.gamma, self.delta];
        if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || !(self.sigma_bell > 0.0) {
            return Err(StenosisError::invalid(format!("invalid MWCE parameters {self:?}")));
        }
        Ok(())
    }
}

/// `w = α·o + b·m` with its components.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap<T> {
    pub weight: Tensor<T>,
    pub base: Tensor<T>,
    pub bell: Tensor<T>,
}

fn last_two(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [.., h, w] => Ok((*h, *w)),
        _ => Err(StenosisError::invalid("mask needs two spatial axes")),
    }
}

/// Builds the weight map from the lesion `y`, silhouette `z`, the stenosis
/// point (in mask coordinates) and the current probabilities `o`.
pub fn mwce_weight_map<T: Scalar>(
    lesion: &Tensor<T>,
    silhouette: &Tensor<T>,
    center: PixelPoint,
    pred: &Tensor<T>,
    params: &MwceParams,
) -> Result<WeightMap<T>> {
    params.validate()?;
    check_pair(lesion, silhouette, "silhouette")?;
    check_pair(lesion, pred, "prediction")?;
    check_binary(lesion, "lesion mask")?;
    check_binary(silhouette, "silhouette mask")?;
    if lesion.data().iter().zip(silhouette.data()).any(|(&y, &z)| y * z != T::zero()) {
        return Err(StenosisError::invalid("lesion and silhouette masks overlap"));
    }
    let (h, w) = last_two(lesion.shape())?;
    if !(0..h as i64).contains(&center.row) || !(0..w as i64).contains(&center.col) {
        return Err(StenosisError::OutOfBounds { row: center.row, col: center.col, size: h.max(w) });
    }
    let (alpha, beta, gamma) = (T::from_f64_lossy(params.alpha), T::from_f64_lossy(params.beta), T::from_f64_lossy(params.gamma));
    let s2 = params.sigma_bell * params.sigma_bell;
    let shape = lesion.shape().to_vec();
    let bell = Tensor::from_fn(shape.clone(), |idx| {
        let (i, j) = ((idx / w) % h, idx % w);
        let d2 = (center.row - i as i64).pow(2) + (center.col - j as i64).pow(2);
        T::from_f64_lossy(1.0 + params.delta * (-(d2 as f64) / s2).exp())
    });
    let base = Tensor::from_fn(shape.clone(), |i| {
        let (y, z) = (lesion.data()[i], silhouette.data()[i]);
        beta * y + gamma * z + (T::one() - y - z)
    });
    let weight = Tensor::from_fn(shape, |i| alpha * pred.data()[i] + base.data()[i] * bell.data()[i]);
    Ok(WeightMap { weight, base, bell })
}

/// Morphologically weighted cross-entropy `−Σ w·[y log σ(o) + (1−y) log(1−σ(o))]`
/// on logits. Unless `stop_weight_gradient` is set, the gradient also flows
/// through `σ(o)` inside `w`.
pub fn mwce_loss<T: Scalar>(
    logits: &Tensor<T>,
    lesion: &Tensor<T>,
    silhouette: &Tensor<T>,
    center: PixelPoint,
    params: &MwceParams,
) -> Result<(T, Tensor<T>)> {
    check_finite(logits, "MWCE loss")?;
    let probs = logits.map(sigmoid);
    let map = mwce_weight_map(lesion, silhouette, center, &probs, params)?;
    let alpha = T::from_f64_lossy(params.alpha);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for i in 0..logits.len() {
        let (o, y, s, w) = (logits.data()[i], lesion.data()[i], probs.data()[i], map.weight.data()[i]);
        let ce = y * softplus(-o) + (T::one() - y) * softplus(o);
        loss += w * ce;
        let mut g = w * (s - y);
        if !params.stop_weight_gradient {
            g += ce * alpha * s * (T::one() - s);
        }
        grad.push(g);
    }
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Mean of `(pred − target)²` over the batch, with gradient over `pred`.
pub fn mse_loss<T: Scalar>(pred: &[T], target: &[T]) -> Result<(T, Vec<T>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(StenosisError::invalid(format!(
            "MSE needs equal nonempty lengths, got {} and {}",
            pred.len(),
            target.len()
        )));
    }
    let n = T::from_usize(pred.len()).unwrap();
    let two = T::from_f64_lossy(2.0);
    let loss = pred.iter().zip(target).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>() / n;
    let grad = pred.iter().zip(target).map(|(&p, &t)| two * (p - t) / n).collect();
    Ok((loss, grad))
}
