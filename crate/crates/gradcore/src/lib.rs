//! Differentiable compute core for small convolutional networks.
//!
//! Tensors are generic over the [`Scalar`] element type: networks train in
//! `f32` and gradient checks run in `f64`. Graphs are built once with
//! [`GraphBuilder`], evaluated with [`Graph::forward`] and differentiated in
//! reverse mode with [`Graph::backward`].

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{GradError, Result};
pub use graph::{Gradients, Graph, GraphBuilder, Node, NodeId, Param, ParamId, Source, Tape};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use ops::{apply, Mode, OpKind};
pub use optim::{optimizer_step, EpochDecision, OptimizerKind, OptimizerState, StepOutcome, TrainConfig};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
