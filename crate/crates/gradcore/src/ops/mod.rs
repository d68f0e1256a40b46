//! Layer operations: forward evaluation, reverse-mode adjoints and shape rules.

mod conv;
mod norm;
mod pool;

use serde::{Deserialize, Serialize};

use crate::error::{GradError, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

pub use norm::NormCache;

/// Forward evaluation mode. Only batch norm behaves differently.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Kind of a graph node plus its static parameters.
///
/// Convolutions and pools operate on `[N, C, H, W]`; `Dense` on `[N, F]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpKind {
    /// Params: weight `[out, in, k, k]` and optional bias `[out]`.
    Conv2d { out_channels: usize, kernel: usize, stride: usize, padding: usize, bias: bool },
    /// Nearest-neighbour 2× upsampling (the decoder's up-path).
    Upsample2x,
    AvgPool2d { size: usize, stride: usize },
    MaxPool2d { size: usize, stride: usize },
    /// `[N, C, H, W] → [N, C]`.
    GlobalMaxPool,
    /// Params: gamma, beta, running mean, running variance (last two are buffers).
    BatchNorm { eps: f64, momentum: f64 },
    LeakyRelu { slope: f64 },
    Relu,
    Sigmoid,
    /// Params: weight `[out, in]` and optional bias `[out]`.
    Dense { out_features: usize, bias: bool },
    /// Concatenation along the channel axis of any number of inputs.
    ConcatChannels,
    /// Elementwise sum of two equally shaped inputs (residual connections).
    Add,
    /// Mean squared error of `(prediction, target)`; scalar output.
    Mse,
}

/// Per-node data saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub enum Cache<T> {
    None,
    Argmax(Vec<usize>),
    Norm(NormCache<T>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Upsample2x => "upsample2x",
            OpKind::AvgPool2d { .. } => "avg_pool2d",
            OpKind::MaxPool2d { .. } => "max_pool2d",
            OpKind::GlobalMaxPool => "global_max_pool",
            OpKind::BatchNorm { .. } => "batch_norm",
            OpKind::LeakyRelu { .. } => "leaky_relu",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Dense { .. } => "dense",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::Add => "add",
            OpKind::Mse => "mse",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(GradError::InvalidOp(format!("{}: {msg}", self.name())));
        match *self {
            OpKind::Conv2d { out_channels, kernel, stride, .. } => {
                if out_channels == 0 || kernel == 0 || stride == 0 {
                    return bad("out_channels, kernel and stride must be >= 1");
                }
            }
            OpKind::AvgPool2d { size, stride } | OpKind::MaxPool2d { size, stride } => {
                if size == 0 || stride == 0 {
                    return bad("size and stride must be >= 1");
                }
            }
            OpKind::BatchNorm { eps, momentum } => {
                if !(eps > 0.0) || !(0.0..1.0).contains(&momentum) {
                    return bad("eps must be > 0 and momentum in [0, 1)");
                }
            }
            OpKind::LeakyRelu { slope } => {
                if !slope.is_finite() || slope < 0.0 {
                    return bad("slope must be finite and >= 0");
                }
            }
            OpKind::Dense { out_features, .. } => {
                if out_features == 0 {
                    return bad("out_features must be >= 1");
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Required input count; `None` means one or more.
    pub fn arity(&self) -> Option<usize> {
        match self {
            OpKind::ConcatChannels => None,
            OpKind::Add | OpKind::Mse => Some(2),
            _ => Some(1),
        }
    }

    /// Shapes of the parameter tensors for the given input shapes.
    pub fn param_shapes(&self, inputs: &[&[usize]]) -> Result<Vec<Vec<usize>>> {
        let channels = || -> Result<usize> {
            inputs
                .first()
                .filter(|s| s.len() >= 2)
                .map(|s| s[1])
                .ok_or_else(|| GradError::Shape(format!("{} needs an [N, C, ...] input", self.name())))
        };
        Ok(match *self {
            OpKind::Conv2d { out_channels, kernel, bias, .. } => {
                let mut v = vec![vec![out_channels, channels()?, kernel, kernel]];
                if bias {
                    v.push(vec![out_channels]);
                }
                v
            }
            OpKind::BatchNorm { .. } => {
                let c = channels()?;
                vec![vec![c]; 4]
            }
            OpKind::Dense { out_features, bias } => {
                let mut v = vec![vec![out_features, channels()?]];
                if bias {
                    v.push(vec![out_features]);
                }
                v
            }
            _ => Vec::new(),
        })
    }

    /// Output shape for the given input shapes (batch dimension included).
    pub fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        match self.arity() {
            Some(k) if inputs.len() != k => {
                return Err(GradError::Shape(format!("{} takes {k} inputs, got {}", self.name(), inputs.len())))
            }
            None if inputs.is_empty() => {
                return Err(GradError::Shape(format!("{} needs at least one input", self.name())))
            }
            _ => {}
        }
        let x = inputs[0];
        let nchw = || -> Result<(usize, usize, usize, usize)> {
            match *x {
                [n, c, h, w] => Ok((n, c, h, w)),
                _ => Err(GradError::Shape(format!("{} needs an NCHW input, got {x:?}", self.name()))),
            }
        };
        let pooled = |side: usize, size: usize, stride: usize| -> Result<usize> {
            if side < size {
                return Err(GradError::Shape(format!("{}: window {size} exceeds side {side}", self.name())));
            }
            Ok((side - size) / stride + 1)
        };
        Ok(match *self {
            OpKind::Conv2d { out_channels, kernel, stride, padding, .. } => {
                let (n, _, h, w) = nchw()?;
                vec![n, out_channels, pooled(h + 2 * padding, kernel, stride)?, pooled(w + 2 * padding, kernel, stride)?]
            }
            OpKind::Upsample2x => {
                let (n, c, h, w) = nchw()?;
                vec![n, c, 2 * h, 2 * w]
            }
            OpKind::AvgPool2d { size, stride } | OpKind::MaxPool2d { size, stride } => {
                let (n, c, h, w) = nchw()?;
                vec![n, c, pooled(h, size, stride)?, pooled(w, size, stride)?]
            }
            OpKind::GlobalMaxPool => {
                let (n, c, _, _) = nchw()?;
                vec![n, c]
            }
            OpKind::BatchNorm { .. } => {
                if x.len() < 2 {
                    return Err(GradError::Shape("batch_norm needs [N, C, ...]".into()));
                }
                x.to_vec()
            }
            OpKind::LeakyRelu { .. } | OpKind::Relu | OpKind::Sigmoid => x.to_vec(),
            OpKind::Dense { out_features, .. } => match *x {
                [n, _] => vec![n, out_features],
                _ => return Err(GradError::Shape(format!("dense needs [N, F], got {x:?}"))),
            },
            OpKind::ConcatChannels => {
                if x.len() < 2 {
                    return Err(GradError::Shape("concat_channels needs rank >= 2".into()));
                }
                let mut c = 0;
                for s in inputs {
                    if s.len() != x.len() || s[0] != x[0] || s[2..] != x[2..] {
                        return Err(GradError::Shape(format!("concat_channels of {x:?} and {s:?}")));
                    }
                    c += s[1];
                }
                let mut out = x.to_vec();
                out[1] = c;
                out
            }
            OpKind::Add | OpKind::Mse => {
                if inputs[1] != x {
                    return Err(GradError::Shape(format!("{} operands {x:?} and {:?}", self.name(), inputs[1])));
                }
                if *self == OpKind::Mse {
                    vec![1]
                } else {
                    x.to_vec()
                }
            }
        })
    }

    /// Whether each parameter slot is trained (false for running statistics).
    pub fn trainable(&self, slot: usize) -> bool {
        !matches!(self, OpKind::BatchNorm { .. } if slot >= 2)
    }
}

fn expect_arity<T: Scalar>(kind: &OpKind, inputs: &[&Tensor<T>], params: &[&Tensor<T>]) -> Result<()> {
    match kind.arity() {
        Some(k) if inputs.len() != k => {
            return Err(GradError::Shape(format!("{} takes {k} inputs, got {}", kind.name(), inputs.len())))
        }
        None if inputs.is_empty() => {
            return Err(GradError::Shape(format!("{} needs at least one input", kind.name())))
        }
        _ => {}
    }
    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
    let want = kind.param_shapes(&shapes)?;
    if want.len() != params.len() {
        return Err(GradError::Shape(format!(
            "{} takes {} parameter tensors, got {}",
            kind.name(),
            want.len(),
            params.len()
        )));
    }
    for (p, s) in params.iter().zip(&want) {
        p.expect_shape(s)?;
    }
    Ok(())
}

/// Evaluates one op.
pub fn apply<T: Scalar>(kind: &OpKind, params: &[&Tensor<T>], inputs: &[&Tensor<T>], mode: Mode) -> Result<Tensor<T>> {
    forward(kind, params, inputs, mode).map(|(out, _)| out)
}

/// Evaluates one op, also returning what its adjoint needs.
pub fn forward<T: Scalar>(
    kind: &OpKind,
    params: &[&Tensor<T>],
    inputs: &[&Tensor<T>],
    mode: Mode,
) -> Result<(Tensor<T>, Cache<T>)> {
    kind.validate()?;
    expect_arity(kind, inputs, params)?;
    let x = inputs[0];
    Ok(match *kind {
        OpKind::Conv2d { stride, padding, bias, .. } => {
            let b = if bias { Some(params[1]) } else { None };
            (conv::conv2d_forward(x, params[0], b, stride, padding)?, Cache::None)
        }
        OpKind::Upsample2x => (conv::upsample2x_forward(x)?, Cache::None),
        OpKind::AvgPool2d { size, stride } => (pool::avg_pool_forward(x, size, stride)?, Cache::None),
        OpKind::MaxPool2d { size, stride } => {
            let (out, arg) = pool::max_pool_forward(x, size, stride)?;
            (out, Cache::Argmax(arg))
        }
        OpKind::GlobalMaxPool => {
            let (out, arg) = pool::global_max_forward(x)?;
            (out, Cache::Argmax(arg))
        }
        OpKind::BatchNorm { eps, .. } => {
            let (out, cache) = norm::forward(
                x,
                params[0],
                params[1],
                params[2],
                params[3],
                T::from_f64_lossy(eps),
                mode == Mode::Train,
            )?;
            (out, Cache::Norm(cache))
        }
        OpKind::LeakyRelu { slope } => {
            let s = T::from_f64_lossy(slope);
            (x.map(|v| if v > T::zero() { v } else { v * s }), Cache::None)
        }
        OpKind::Relu => (x.map(|v| v.max(T::zero())), Cache::None),
        OpKind::Sigmoid => (x.map(sigmoid), Cache::None),
        OpKind::Dense { out_features, bias } => {
            let (n, f) = dims2(x)?;
            let mut out = Tensor::zeros([n, out_features]);
            // Y = X · Wᵀ
            gemm(n, f, out_features, x.data(), false, params[0].data(), true, T::zero(), out.data_mut());
            if bias {
                for row in out.data_mut().chunks_mut(out_features) {
                    for (v, &b) in row.iter_mut().zip(params[1].data()) {
                        *v += b;
                    }
                }
            }
            (out, Cache::None)
        }
        OpKind::ConcatChannels => (concat_channels(inputs)?, Cache::None),
        OpKind::Add => {
            let mut out = x.clone();
            out.add_assign(inputs[1])
                .map_err(|e| GradError::Shape(format!("add operands differ: {e}")))?;
            (out, Cache::None)
        }
        OpKind::Mse => {
            inputs[1].expect_shape(x.shape())?;
            let m = T::from_usize(x.len()).unwrap();
            let s: T = x.data().iter().zip(inputs[1].data()).map(|(&p, &t)| (p - t) * (p - t)).sum();
            (Tensor::scalar(s / m), Cache::None)
        }
    })
}

/// Adjoint of one op: gradients for every input and every parameter slot
/// (`None` for non-trainable slots).
#[allow(clippy::type_complexity)]
pub fn backward<T: Scalar>(
    kind: &OpKind,
    params: &[&Tensor<T>],
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    cache: &Cache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Vec<Tensor<T>>, Vec<Option<Tensor<T>>>)> {
    grad_out.expect_shape(output.shape())?;
    let x = inputs[0];
    Ok(match (kind, cache) {
        (&OpKind::Conv2d { stride, padding, bias, .. }, _) => {
            let (dx, dw, db) = conv::conv2d_backward(x, params[0], bias, stride, padding, grad_out)?;
            let mut pg = vec![Some(dw)];
            if bias {
                pg.push(db);
            }
            (vec![dx], pg)
        }
        (OpKind::Upsample2x, _) => (vec![conv::upsample2x_backward(x, grad_out)?], vec![]),
        (&OpKind::AvgPool2d { size, stride }, _) => {
            (vec![pool::avg_pool_backward(x, size, stride, grad_out)?], vec![])
        }
        (OpKind::MaxPool2d { .. } | OpKind::GlobalMaxPool, Cache::Argmax(arg)) => {
            (vec![pool::scatter_argmax(x.shape(), arg, grad_out)?], vec![])
        }
        (OpKind::BatchNorm { .. }, Cache::Norm(c)) => {
            let (dx, dg, db) = norm::backward(x, params[0], c, grad_out)?;
            (vec![dx], vec![Some(dg), Some(db), None, None])
        }
        (&OpKind::LeakyRelu { slope }, _) => {
            let s = T::from_f64_lossy(slope);
            (vec![zip_map(x, grad_out, |v, g| if v > T::zero() { g } else { g * s })], vec![])
        }
        (OpKind::Relu, _) => (vec![zip_map(x, grad_out, |v, g| if v > T::zero() { g } else { T::zero() })], vec![]),
        (OpKind::Sigmoid, _) => (vec![zip_map(output, grad_out, |y, g| g * y * (T::one() - y))], vec![]),
        (&OpKind::Dense { out_features, bias }, _) => {
            let (n, f) = dims2(x)?;
            let mut dx = Tensor::zeros([n, f]);
            // dX = dY · W
            gemm(n, out_features, f, grad_out.data(), false, params[0].data(), false, T::zero(), dx.data_mut());
            // dW = dYᵀ · X
            let mut dw = Tensor::zeros([out_features, f]);
            gemm(out_features, n, f, grad_out.data(), true, x.data(), false, T::zero(), dw.data_mut());
            let mut pg = vec![Some(dw)];
            if bias {
                let mut db = Tensor::zeros([out_features]);
                for row in grad_out.data().chunks(out_features) {
                    for (d, &g) in db.data_mut().iter_mut().zip(row) {
                        *d += g;
                    }
                }
                pg.push(Some(db));
            }
            (vec![dx], pg)
        }
        (OpKind::ConcatChannels, _) => (split_channels(inputs, grad_out)?, vec![]),
        (OpKind::Add, _) => (vec![grad_out.clone(), grad_out.clone()], vec![]),
        (OpKind::Mse, _) => {
            let g = grad_out.item();
            let m = T::from_usize(x.len()).unwrap();
            let k = (g + g) / m;
            let dp = zip_map(x, inputs[1], |p, t| k * (p - t));
            let dt = dp.map(|v| -v);
            (vec![dp, dt], vec![])
        }
        (kind, _) => {
            return Err(GradError::InvalidOp(format!("{}: forward cache missing for backward", kind.name())))
        }
    })
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map operands share a shape")
}

fn dims2<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize)> {
    match x.shape() {
        &[n, f] => Ok((n, f)),
        s => Err(GradError::Shape(format!("expected [N, F], got {s:?}"))),
    }
}

fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs[0];
    if first.ndim() < 2 {
        return Err(GradError::Shape("concat_channels needs rank >= 2".into()));
    }
    let n = first.shape()[0];
    let rest = &first.shape()[2..];
    let plane: usize = rest.iter().product();
    let mut total_c = 0;
    for t in inputs {
        if t.ndim() != first.ndim() || t.shape()[0] != n || &t.shape()[2..] != rest {
            return Err(GradError::Shape(format!(
                "concat_channels of {:?} and {:?}",
                first.shape(),
                t.shape()
            )));
        }
        total_c += t.shape()[1];
    }
    let mut data = Vec::with_capacity(n * total_c * plane);
    for b in 0..n {
        for t in inputs {
            let c = t.shape()[1];
            data.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = total_c;
    Tensor::new(shape, data)
}

fn split_channels<T: Scalar>(inputs: &[&Tensor<T>], grad: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let mut start = 0;
    inputs
        .iter()
        .map(|t| {
            let c = t.shape()[1];
            let part = grad.slice_channels(start..start + c);
            start += c;
            part
        })
        .collect()
}

/// Smallest distance of any kink (ReLU zero crossing, max-pool tie) from
/// the given inputs. Finite differences across a kink are meaningless.
pub fn kink_margin<T: Scalar>(kind: &OpKind, inputs: &[&Tensor<T>]) -> Result<T> {
    Ok(match *kind {
        OpKind::Relu | OpKind::LeakyRelu { .. } => inputs[0].data().iter().fold(T::infinity(), |m, v| m.min(v.abs())),
        OpKind::MaxPool2d { size, stride } => pool::max_pool_min_gap(inputs[0], size, stride)?,
        OpKind::GlobalMaxPool => pool::global_max_min_gap(inputs[0])?,
        _ => T::infinity(),
    })
}
