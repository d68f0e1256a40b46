//! Static computation graphs with recorded forward passes and reverse-mode
//! gradients.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{GradError, Result};
use crate::ops::{self, Cache, Mode, OpKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type NodeId = usize;
pub type ParamId = usize;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Where a node reads one of its inputs from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Input(usize),
    Node(NodeId),
}

#[derive(Clone, Debug)]
pub struct Node {
    pub name: String,
    pub op: OpKind,
    pub inputs: Vec<Source>,
    pub params: Vec<ParamId>,
    /// Output shape for a batch of one.
    pub shape: Vec<usize>,
}

/// A named parameter tensor. Running statistics are stored as
/// non-trainable parameters so they travel with checkpoints.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub struct Graph<T> {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<Param<T>>,
    input_shapes: Vec<Vec<usize>>,
    output: NodeId,
    frozen: BTreeSet<String>,
}

/// Activations recorded by [`Graph::forward`].
#[derive(Clone, Debug)]
pub struct Tape<T> {
    graph_id: u64,
    mode: Mode,
    inputs: Vec<Tensor<T>>,
    outputs: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn node_output(&self, id: NodeId) -> &Tensor<T> {
        &self.outputs[id]
    }
}

/// Gradients of a scalar with respect to every parameter and graph input.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    /// `None` for parameters the loss does not depend on and for buffers.
    pub params: Vec<Option<Tensor<T>>>,
    pub inputs: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(Tensor::all_finite) && self.inputs.iter().all(Tensor::all_finite)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn input_shapes(&self) -> &[Vec<usize>] {
        &self.input_shapes
    }

    pub fn output_node(&self) -> NodeId {
        self.output
    }

    /// Per-example output shape (batch dimension removed).
    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output].shape[1..]
    }

    /// Number of nodes of the given op name, e.g. `"conv2d"`.
    pub fn count_ops(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.name() == name).count()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn groups(&self) -> BTreeSet<String> {
        self.params.iter().map(|p| p.group.clone()).collect()
    }

    pub fn freeze_group(&mut self, group: &str) {
        self.frozen.insert(group.to_string());
    }

    pub fn unfreeze_group(&mut self, group: &str) {
        self.frozen.remove(group);
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen.contains(&self.params[id].group)
    }

    /// Whether the optimizer may change parameter `id`.
    pub fn is_updatable(&self, id: ParamId) -> bool {
        self.params[id].trainable && !self.is_frozen(id)
    }

    fn check_inputs(&self, inputs: &[Tensor<T>]) -> Result<()> {
        if inputs.len() != self.input_shapes.len() {
            return Err(GradError::Shape(format!(
                "graph takes {} inputs, got {}",
                self.input_shapes.len(),
                inputs.len()
            )));
        }
        let batch = inputs[0].shape()[0];
        for (i, (t, want)) in inputs.iter().zip(&self.input_shapes).enumerate() {
            if t.ndim() != want.len() + 1 || &t.shape()[1..] != want.as_slice() || t.shape()[0] != batch {
                return Err(GradError::Shape(format!(
                    "input {i}: expected [{batch}, {}], got {:?}",
                    want.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", "),
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Runs the graph on a batch, recording every activation.
    pub fn forward(&self, inputs: &[Tensor<T>], mode: Mode) -> Result<Tape<T>> {
        self.check_inputs(inputs)?;
        let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut caches = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let args: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|s| match *s {
                    Source::Input(i) => &inputs[i],
                    Source::Node(n) => &outputs[n],
                })
                .collect();
            let params: Vec<&Tensor<T>> = node.params.iter().map(|&p| &self.params[p].value).collect();
            let (out, cache) =
                ops::forward(&node.op, &params, &args, mode).map_err(|e| GradError::at_node(&node.name, e))?;
            outputs.push(out);
            caches.push(cache);
        }
        Ok(Tape { graph_id: self.id, mode, inputs: inputs.to_vec(), outputs, caches })
    }

    /// Inference-mode forward returning only the output.
    pub fn predict(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut tape = self.forward(inputs, Mode::Inference)?;
        Ok(tape.outputs.swap_remove(self.output))
    }

    pub fn output<'a>(&self, tape: &'a Tape<T>) -> &'a Tensor<T> {
        &tape.outputs[self.output]
    }

    /// Reverse-mode gradients of `Σ upstream ⊙ output`.
    pub fn backward(&self, tape: &Tape<T>, upstream: &Tensor<T>) -> Result<Gradients<T>> {
        if tape.graph_id != self.id || tape.outputs.len() != self.nodes.len() {
            return Err(GradError::StaleTape);
        }
        upstream.expect_shape(tape.outputs[self.output].shape())?;
        let mut node_grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut param_grads: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];
        let mut input_grads: Vec<Tensor<T>> = tape.inputs.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        node_grads[self.output] = Some(upstream.clone());

        for id in (0..=self.output).rev() {
            let Some(grad) = node_grads[id].take() else { continue };
            let node = &self.nodes[id];
            let args: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|s| match *s {
                    Source::Input(i) => &tape.inputs[i],
                    Source::Node(n) => &tape.outputs[n],
                })
                .collect();
            let params: Vec<&Tensor<T>> = node.params.iter().map(|&p| &self.params[p].value).collect();
            let (gin, gparams) = ops::backward(&node.op, &params, &args, &tape.outputs[id], &tape.caches[id], &grad)
                .map_err(|e| GradError::at_node(&node.name, e))?;
            for (src, g) in node.inputs.iter().zip(gin) {
                match *src {
                    Source::Input(i) => input_grads[i].add_assign(&g)?,
                    Source::Node(n) => match node_grads[n].as_mut() {
                        Some(acc) => acc.add_assign(&g)?,
                        None => node_grads[n] = Some(g),
                    },
                }
            }
            for (&pid, g) in node.params.iter().zip(gparams) {
                let Some(g) = g else { continue };
                match param_grads[pid].as_mut() {
                    Some(acc) => acc.add_assign(&g)?,
                    None => param_grads[pid] = Some(g),
                }
            }
        }
        Ok(Gradients { params: param_grads, inputs: input_grads })
    }

    /// Gradients of a scalar loss node (the graph output).
    pub fn gradient(&self, tape: &Tape<T>) -> Result<Gradients<T>> {
        let out = self.output(tape);
        if out.len() != 1 {
            return Err(GradError::NonScalarLoss(out.shape().to_vec()));
        }
        self.backward(tape, &Tensor::full(out.shape().to_vec(), T::one()))
    }

    /// Folds the batch statistics of a training-mode tape into the running
    /// averages: `running = momentum·running + (1 − momentum)·batch`.
    /// Frozen groups are left untouched.
    pub fn update_running_stats(&mut self, tape: &Tape<T>) -> Result<()> {
        if tape.graph_id != self.id {
            return Err(GradError::StaleTape);
        }
        if tape.mode != Mode::Train {
            return Ok(());
        }
        for (node, cache) in self.nodes.iter().zip(&tape.caches) {
            let (OpKind::BatchNorm { momentum, .. }, Cache::Norm(c)) = (&node.op, cache) else { continue };
            if self.frozen.contains(&self.params[node.params[2]].group) {
                continue;
            }
            let m = T::from_f64_lossy(*momentum);
            let k = T::one() - m;
            for (slot, batch) in [(2, &c.batch_mean), (3, &c.batch_var)] {
                let run = self.params[node.params[slot]].value.data_mut();
                for (r, &b) in run.iter_mut().zip(batch) {
                    *r = m * *r + k * b;
                }
            }
        }
        Ok(())
    }

    /// Smallest distance of any recorded activation from a kink.
    pub fn kink_margin(&self, tape: &Tape<T>) -> Result<T> {
        let mut margin = T::infinity();
        for node in &self.nodes {
            let args: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|s| match *s {
                    Source::Input(i) => &tape.inputs[i],
                    Source::Node(n) => &tape.outputs[n],
                })
                .collect();
            margin = margin.min(ops::kink_margin(&node.op, &args)?);
        }
        Ok(margin)
    }

    /// Copies parameter values from another graph with the same layout.
    pub fn copy_params_from(&mut self, other: &Graph<T>) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(GradError::Shape("parameter lists differ".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name {
                return Err(GradError::Shape(format!("parameter `{}` vs `{}`", dst.name, src.name)));
            }
            src.value.expect_shape(dst.value.shape())?;
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// Snapshot of all parameter values (used to restore best weights).
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<T>]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(GradError::Shape("snapshot does not match graph".into()));
        }
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            v.expect_shape(p.value.shape())?;
            p.value = v.clone();
        }
        Ok(())
    }

    /// Re-types the graph (e.g. f32 weights to f64 for gradient checks).
    pub fn cast<U: Scalar>(&self) -> Graph<U> {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: self.nodes.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), group: p.group.clone(), value: p.value.cast(), trainable: p.trainable })
                .collect(),
            input_shapes: self.input_shapes.clone(),
            output: self.output,
            frozen: self.frozen.clone(),
        }
    }
}

/// Incrementally builds a [`Graph`], initializing parameters from a seed.
///
/// Convolution and dense weights use He-normal initialization; biases and
/// batch-norm shifts start at zero, scales and running variances at one.
pub struct GraphBuilder<T> {
    nodes: Vec<Node>,
    params: Vec<Param<T>>,
    input_shapes: Vec<Vec<usize>>,
    group: String,
    rng: ChaCha8Rng,
}

impl<T: Scalar> GraphBuilder<T> {
    pub fn new(seed: u64) -> Self {
        GraphBuilder {
            nodes: Vec::new(),
            params: Vec::new(),
            input_shapes: Vec::new(),
            group: "main".into(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Declares a graph input with per-example shape `shape`.
    pub fn input(&mut self, shape: &[usize]) -> Source {
        self.input_shapes.push(shape.to_vec());
        Source::Input(self.input_shapes.len() - 1)
    }

    /// Parameter group assigned to nodes added from now on.
    pub fn set_group(&mut self, group: &str) {
        self.group = group.to_string();
    }

    pub fn shape_of(&self, src: Source) -> Vec<usize> {
        match src {
            Source::Input(i) => std::iter::once(1).chain(self.input_shapes[i].iter().copied()).collect(),
            Source::Node(n) => self.nodes[n].shape.clone(),
        }
    }

    pub fn node(&mut self, name: &str, op: OpKind, inputs: &[Source]) -> Result<Source> {
        let wrap = |e| GradError::at_node(name, e);
        op.validate().map_err(wrap)?;
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|&s| self.shape_of(s)).collect();
        let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let shape = op.output_shape(&refs).map_err(wrap)?;
        let param_shapes = op.param_shapes(&refs).map_err(wrap)?;
        let mut params = Vec::with_capacity(param_shapes.len());
        for (slot, pshape) in param_shapes.into_iter().enumerate() {
            let (suffix, value) = self.init_param(&op, slot, pshape);
            self.params.push(Param {
                name: format!("{name}.{suffix}"),
                group: self.group.clone(),
                value,
                trainable: op.trainable(slot),
            });
            params.push(self.params.len() - 1);
        }
        self.nodes.push(Node { name: name.to_string(), op, inputs: inputs.to_vec(), params, shape });
        Ok(Source::Node(self.nodes.len() - 1))
    }

    fn init_param(&mut self, op: &OpKind, slot: usize, shape: Vec<usize>) -> (&'static str, Tensor<T>) {
        match (op, slot) {
            (OpKind::Conv2d { .. } | OpKind::Dense { .. }, 0) => {
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                let rng = &mut self.rng;
                ("weight", Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(rng))))
            }
            (OpKind::Conv2d { .. } | OpKind::Dense { .. }, _) => ("bias", Tensor::zeros(shape)),
            (OpKind::BatchNorm { .. }, 0) => ("gamma", Tensor::full(shape, T::one())),
            (OpKind::BatchNorm { .. }, 1) => ("beta", Tensor::zeros(shape)),
            (OpKind::BatchNorm { .. }, 2) => ("running_mean", Tensor::zeros(shape)),
            (OpKind::BatchNorm { .. }, _) => ("running_var", Tensor::full(shape, T::one())),
            _ => unreachable!("op without parameters"),
        }
    }

    pub fn finish(self, output: Source) -> Result<Graph<T>> {
        let Source::Node(output) = output else {
            return Err(GradError::Shape("graph output must be a node".into()));
        };
        if self.input_shapes.is_empty() {
            return Err(GradError::Shape("graph has no inputs".into()));
        }
        Ok(Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: self.nodes,
            params: self.params,
            input_shapes: self.input_shapes,
            output,
            frozen: BTreeSet::new(),
        })
    }
}
