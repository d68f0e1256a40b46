//! Central finite-difference verification of analytic gradients (64-bit).
//!
//! The scalar under test is a random projection `Σ r ⊙ output` so every
//! output element contributes. An element passes when its absolute error is
//! at most `abs_tolerance` or its relative error
//! `|a − n| / max(|a|, |n|)` is at most `tolerance`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::graph::{Graph, GraphBuilder};
use crate::ops::{Mode, OpKind};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    pub abs_tolerance: f64,
    pub step: f64,
    /// Fresh draws allowed when a sample lands near a kink.
    pub max_retries: usize,
    pub mode: Mode,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { tolerance: 1e-3, abs_tolerance: 1e-6, step: 1e-5, max_retries: 5, mode: Mode::Train }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradCheckReport {
    pub label: String,
    /// Largest relative error among elements exceeding the absolute tolerance.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub attempts: usize,
    pub pass: bool,
    /// Every draw sat on a non-differentiable point.
    pub inconclusive: bool,
}

#[derive(Default)]
struct ErrorStats {
    max_rel: f64,
    max_abs: f64,
    checked: usize,
    failed: bool,
}

impl ErrorStats {
    fn record(&mut self, analytic: f64, numeric: f64, opts: &GradCheckOptions) {
        let abs = (analytic - numeric).abs();
        self.checked += 1;
        self.max_abs = self.max_abs.max(abs);
        if !abs.is_finite() {
            self.failed = true;
            self.max_rel = f64::INFINITY;
            return;
        }
        if abs <= opts.abs_tolerance {
            return;
        }
        let rel = abs / analytic.abs().max(numeric.abs());
        self.max_rel = self.max_rel.max(rel);
        if rel > opts.tolerance {
            self.failed = true;
        }
    }

    fn report(self, label: &str, attempts: usize) -> GradCheckReport {
        GradCheckReport {
            label: label.to_string(),
            max_rel_error: self.max_rel,
            max_abs_error: self.max_abs,
            checked: self.checked,
            attempts,
            pass: !self.failed,
            inconclusive: false,
        }
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Checks a scalar function of one tensor against its claimed gradient.
pub fn check_scalar_fn(
    label: &str,
    x: &Tensor<f64>,
    opts: &GradCheckOptions,
    f: impl Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
) -> Result<GradCheckReport> {
    let (_, analytic) = f(x)?;
    analytic.expect_shape(x.shape())?;
    let mut stats = ErrorStats::default();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + opts.step;
        let (up, _) = f(&probe)?;
        probe.data_mut()[i] = orig - opts.step;
        let (down, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        stats.record(analytic.data()[i], (up - down) / (2.0 * opts.step), opts);
    }
    Ok(stats.report(label, 1))
}

fn projected(graph: &Graph<f64>, inputs: &[Tensor<f64>], proj: &Tensor<f64>, mode: Mode) -> Result<f64> {
    let tape = graph.forward(inputs, mode)?;
    Ok(graph.output(&tape).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
}

/// One finite-difference pass over every input element and trainable
/// parameter of `graph`. Returns `None` when the draw sits near a kink.
fn check_graph_once(
    graph: &mut Graph<f64>,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Option<ErrorStats>> {
    let tape = graph.forward(inputs, opts.mode)?;
    if graph.kink_margin(&tape)? < 10.0 * opts.step {
        return Ok(None);
    }
    let proj = random_tensor(graph.output(&tape).shape(), rng);
    let grads = graph.backward(&tape, &proj)?;
    let mut stats = ErrorStats::default();

    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for k in 0..probe.len() {
        for i in 0..probe[k].len() {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + opts.step;
            let up = projected(graph, &probe, &proj, opts.mode)?;
            probe[k].data_mut()[i] = orig - opts.step;
            let down = projected(graph, &probe, &proj, opts.mode)?;
            probe[k].data_mut()[i] = orig;
            stats.record(grads.inputs[k].data()[i], (up - down) / (2.0 * opts.step), opts);
        }
    }
    for p in 0..graph.params().len() {
        if !graph.params()[p].trainable {
            continue;
        }
        for i in 0..graph.params()[p].value.len() {
            let orig = graph.params()[p].value.data()[i];
            graph.params_mut()[p].value.data_mut()[i] = orig + opts.step;
            let up = projected(graph, inputs, &proj, opts.mode)?;
            graph.params_mut()[p].value.data_mut()[i] = orig - opts.step;
            let down = projected(graph, inputs, &proj, opts.mode)?;
            graph.params_mut()[p].value.data_mut()[i] = orig;
            let analytic = grads.params[p].as_ref().map_or(0.0, |g| g.data()[i]);
            stats.record(analytic, (up - down) / (2.0 * opts.step), opts);
        }
    }
    Ok(Some(stats))
}

/// Checks a whole graph. `make_inputs` draws a fresh input batch per attempt.
pub fn grad_check_graph(
    label: &str,
    graph: &Graph<f64>,
    mut make_inputs: impl FnMut(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    opts: &GradCheckOptions,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut graph = graph.clone();
    for attempt in 1..=opts.max_retries.max(1) {
        let inputs = make_inputs(&mut rng);
        if let Some(stats) = check_graph_once(&mut graph, &inputs, opts, &mut rng)? {
            return Ok(stats.report(label, attempt));
        }
    }
    Ok(GradCheckReport {
        label: label.to_string(),
        attempts: opts.max_retries.max(1),
        inconclusive: true,
        ..GradCheckReport::default()
    })
}

/// Gradient check of a single op on random inputs of the given full
/// (batch-inclusive) shapes, with randomized parameters.
pub fn grad_check(
    kind: &OpKind,
    input_shapes: &[Vec<usize>],
    opts: &GradCheckOptions,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut builder = GraphBuilder::<f64>::new(seed);
    let sources: Vec<_> = input_shapes.iter().map(|s| builder.input(&s[1..])).collect();
    let out = builder.node(kind.name(), kind.clone(), &sources)?;
    let mut graph = builder.finish(out)?;
    for p in graph.params_mut() {
        if p.trainable {
            p.value = random_tensor(p.value.shape(), &mut rng);
        } else if p.name.ends_with("running_var") {
            p.value = Tensor::from_fn(p.value.shape().to_vec(), |_| 0.5 + rng.random::<f64>());
        } else {
            p.value = random_tensor(p.value.shape(), &mut rng);
        }
    }
    let shapes = input_shapes.to_vec();
    grad_check_graph(
        kind.name(),
        &graph,
        |rng| shapes.iter().map(|s| random_tensor(s, rng)).collect(),
        opts,
        seed,
    )
}

/// Representative shapes for each op kind, used by the check suite.
pub fn standard_cases() -> Vec<(OpKind, Vec<Vec<usize>>)> {
    let img = vec![2, 3, 8, 8];
    vec![
        (OpKind::Conv2d { out_channels: 4, kernel: 3, stride: 1, padding: 1, bias: true }, vec![img.clone()]),
        (OpKind::Conv2d { out_channels: 2, kernel: 3, stride: 2, padding: 1, bias: false }, vec![img.clone()]),
        (OpKind::Conv2d { out_channels: 3, kernel: 2, stride: 1, padding: 0, bias: true }, vec![img.clone()]),
        (OpKind::Conv2d { out_channels: 2, kernel: 1, stride: 1, padding: 0, bias: true }, vec![img.clone()]),
        (OpKind::Upsample2x, vec![vec![2, 2, 4, 4]]),
        (OpKind::AvgPool2d { size: 2, stride: 2 }, vec![img.clone()]),
        (OpKind::MaxPool2d { size: 2, stride: 2 }, vec![img.clone()]),
        (OpKind::GlobalMaxPool, vec![img.clone()]),
        (OpKind::BatchNorm { eps: 1e-5, momentum: 0.9 }, vec![vec![4, 3, 4, 4]]),
        (OpKind::BatchNorm { eps: 1e-5, momentum: 0.9 }, vec![vec![4, 5]]),
        (OpKind::LeakyRelu { slope: 0.1 }, vec![img.clone()]),
        (OpKind::Relu, vec![img.clone()]),
        (OpKind::Sigmoid, vec![img.clone()]),
        (OpKind::Dense { out_features: 3, bias: true }, vec![vec![2, 6]]),
        (OpKind::ConcatChannels, vec![img.clone(), vec![2, 2, 8, 8]]),
        (OpKind::Add, vec![img.clone(), img]),
        (OpKind::Mse, vec![vec![4, 1], vec![4, 1]]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_on_8x8_passes() {
        let kind = OpKind::Conv2d { out_channels: 2, kernel: 3, stride: 1, padding: 1, bias: true };
        let r = grad_check(&kind, &[vec![1, 2, 8, 8]], &GradCheckOptions::default(), 7).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.checked > 128);
    }

    #[test]
    fn max_pool_with_distinct_inputs_passes() {
        let r = grad_check(&OpKind::MaxPool2d { size: 2, stride: 2 }, &[vec![1, 1, 8, 8]], &GradCheckOptions::default(), 2)
            .unwrap();
        assert!(r.pass && !r.inconclusive, "{r:?}");
    }

    #[test]
    fn batch_norm_batch_of_four_passes() {
        let r = grad_check(
            &OpKind::BatchNorm { eps: 1e-5, momentum: 0.9 },
            &[vec![4, 2, 3, 3]],
            &GradCheckOptions::default(),
            11,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::<f64>::from_fn([5], |i| i as f64 * 0.3 + 0.1);
        let r = check_scalar_fn("wrong", &x, &GradCheckOptions::default(), |x| {
            let v = x.data().iter().map(|a| a * a).sum();
            Ok((v, x.map(|a| 3.0 * a)))
        })
        .unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn tied_max_pool_is_inconclusive() {
        let mut b = GraphBuilder::<f64>::new(0);
        let x = b.input(&[1, 2, 2]);
        let y = b.node("mp", OpKind::MaxPool2d { size: 2, stride: 2 }, &[x]).unwrap();
        let g = b.finish(y).unwrap();
        let r = grad_check_graph("tie", &g, |_| vec![Tensor::full([1, 1, 2, 2], 1.0)], &GradCheckOptions::default(), 0)
            .unwrap();
        assert!(r.inconclusive && !r.pass);
        assert_eq!(r.attempts, 5);
    }
}
