//! Adam updates plus the validation-driven schedule: learning-rate reduction
//! on plateau and early stopping.

use serde::{Deserialize, Serialize};

use crate::error::{GradError, Result};
use crate::graph::{Gradients, Graph};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr_reduce_patience: usize,
    pub lr_reduce_factor: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 100,
            early_stop_patience: 20,
            lr_reduce_patience: 5,
            lr_reduce_factor: 0.2,
            batch_size: 2,
            optimizer: OptimizerKind::default(),
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GradError::Config(m.to_string()));
        if self.early_stop_patience == 0 || self.lr_reduce_patience == 0 {
            return bad("patiences must be >= 1");
        }
        if !(self.lr_reduce_factor > 0.0 && self.lr_reduce_factor < 1.0) {
            return bad("lr_reduce_factor must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN or infinity; no parameter changed.
    SkippedNonFinite,
}

/// What the schedule decided at the end of an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EpochDecision {
    pub improved: bool,
    pub lr_reduced: bool,
    pub stop: bool,
}

#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    kind: OptimizerKind,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
    steps: u64,
    learning_rate: f64,
    lr_factor: f64,
    lr_patience: usize,
    stop_patience: usize,
    best: Option<f64>,
    best_epoch: Option<usize>,
    epochs: usize,
    since_improvement: usize,
    since_lr_change: usize,
    skipped_steps: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(graph: &Graph<T>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let n = graph.params().len();
        Ok(OptimizerState {
            kind: config.optimizer.clone(),
            first: vec![None; n],
            second: vec![None; n],
            steps: 0,
            learning_rate: config.learning_rate,
            lr_factor: config.lr_reduce_factor,
            lr_patience: config.lr_reduce_patience,
            stop_patience: config.early_stop_patience,
            best: None,
            best_epoch: None,
            epochs: 0,
            since_improvement: 0,
            since_lr_change: 0,
            skipped_steps: 0,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn skipped_steps(&self) -> u64 {
        self.skipped_steps
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.since_improvement
    }

    /// Records one epoch's validation loss (lower is better).
    ///
    /// The learning rate is multiplied by the reduction factor each time
    /// `lr_reduce_patience` consecutive epochs pass without improvement (the
    /// counter restarts after each reduction). Training should stop once
    /// `early_stop_patience` consecutive epochs pass without improvement.
    pub fn end_epoch(&mut self, validation_loss: f64) -> EpochDecision {
        let epoch = self.epochs;
        self.epochs += 1;
        let improved = validation_loss.is_finite() && self.best.is_none_or(|b| validation_loss < b);
        if improved {
            self.best = Some(validation_loss);
            self.best_epoch = Some(epoch);
            self.since_improvement = 0;
            self.since_lr_change = 0;
            return EpochDecision { improved: true, lr_reduced: false, stop: false };
        }
        self.since_improvement += 1;
        self.since_lr_change += 1;
        let mut decision = EpochDecision::default();
        if self.since_lr_change >= self.lr_patience {
            self.learning_rate *= self.lr_factor;
            self.since_lr_change = 0;
            decision.lr_reduced = true;
        }
        decision.stop = self.since_improvement >= self.stop_patience;
        decision
    }
}

/// Applies one optimizer update to every updatable parameter.
///
/// Frozen groups and buffers are never written. If any gradient of an
/// updatable parameter is non-finite the whole step is skipped.
pub fn optimizer_step<T: Scalar>(
    graph: &mut Graph<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
) -> Result<StepOutcome> {
    if grads.params.len() != graph.params().len() || state.first.len() != graph.params().len() {
        return Err(GradError::Shape("gradients do not match graph parameters".into()));
    }
    let updatable: Vec<usize> = (0..graph.params().len()).filter(|&i| graph.is_updatable(i)).collect();
    for &i in &updatable {
        if let Some(g) = &grads.params[i] {
            g.expect_shape(graph.params()[i].value.shape())?;
            if !g.all_finite() {
                state.skipped_steps += 1;
                return Ok(StepOutcome::SkippedNonFinite);
            }
        }
    }
    state.steps += 1;
    let lr = state.learning_rate;
    match state.kind {
        OptimizerKind::Sgd => {
            let lr = T::from_f64_lossy(lr);
            for &i in &updatable {
                let Some(g) = &grads.params[i] else { continue };
                for (p, &d) in graph.params_mut()[i].value.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * d;
                }
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let t = state.steps as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let step = T::from_f64_lossy(lr * c2.sqrt() / c1);
            let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
            let eps = T::from_f64_lossy(eps * c2.sqrt());
            for &i in &updatable {
                let Some(g) = &grads.params[i] else { continue };
                let shape = g.shape().to_vec();
                let m = state.first[i].get_or_insert_with(|| Tensor::zeros(shape.clone()));
                let v = state.second[i].get_or_insert_with(|| Tensor::zeros(shape));
                let p = graph.params_mut()[i].value.data_mut();
                for (((p, &d), m), v) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                    *m = b1 * *m + (T::one() - b1) * d;
                    *v = b2 * *v + (T::one() - b2) * d * d;
                    *p -= step * *m / (v.sqrt() + eps);
                }
            }
        }
    }
    Ok(StepOutcome::Applied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use crate::ops::{Mode, OpKind};

    fn graph() -> Graph<f64> {
        let mut b = GraphBuilder::<f64>::new(1);
        let x = b.input(&[3]);
        b.set_group("frozen");
        let h = b.node("a", OpKind::Dense { out_features: 3, bias: true }, &[x]).unwrap();
        b.set_group("live");
        let y = b.node("b", OpKind::Dense { out_features: 1, bias: true }, &[h]).unwrap();
        b.finish(y).unwrap()
    }

    fn grads_for(g: &Graph<f64>) -> Gradients<f64> {
        let x = Tensor::from_fn([2, 3], |i| i as f64 - 2.0);
        let tape = g.forward(&[x], Mode::Train).unwrap();
        g.backward(&tape, &Tensor::full([2, 1], 1.0)).unwrap()
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut g = graph();
        let before = g.snapshot();
        let mut grads = grads_for(&g);
        for p in grads.params.iter_mut().flatten() {
            p.data_mut().fill(0.0);
        }
        let mut st = OptimizerState::new(&g, &TrainConfig::default()).unwrap();
        assert_eq!(optimizer_step(&mut g, &grads, &mut st).unwrap(), StepOutcome::Applied);
        assert_eq!(g.snapshot(), before);
    }

    #[test]
    fn frozen_group_is_bit_identical() {
        let mut g = graph();
        g.freeze_group("frozen");
        let before = g.snapshot();
        let grads = grads_for(&g);
        let mut st = OptimizerState::new(&g, &TrainConfig::default()).unwrap();
        optimizer_step(&mut g, &grads, &mut st).unwrap();
        let after = g.snapshot();
        for (i, p) in g.params().iter().enumerate() {
            if p.group == "frozen" {
                assert_eq!(after[i], before[i]);
            } else {
                assert_ne!(after[i], before[i]);
            }
        }
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut g = graph();
        let before = g.snapshot();
        let mut grads = grads_for(&g);
        grads.params[2].as_mut().unwrap().data_mut()[0] = f64::NAN;
        let mut st = OptimizerState::new(&g, &TrainConfig::default()).unwrap();
        assert_eq!(optimizer_step(&mut g, &grads, &mut st).unwrap(), StepOutcome::SkippedNonFinite);
        assert_eq!(g.snapshot(), before);
        assert_eq!(st.skipped_steps(), 1);
    }

    #[test]
    fn six_flat_epochs_reduce_lr_once() {
        let g = graph();
        let mut st = OptimizerState::new(&g, &TrainConfig::default()).unwrap();
        assert!(st.end_epoch(1.0).improved);
        let reductions = (0..6).filter(|_| st.end_epoch(1.0).lr_reduced).count();
        assert_eq!(reductions, 1);
        assert_eq!(st.learning_rate(), 1e-3 * 0.2);
    }

    #[test]
    fn early_stop_after_patience() {
        let g = graph();
        let mut st = OptimizerState::new(&g, &TrainConfig::default()).unwrap();
        st.end_epoch(0.5);
        for i in 1..=20 {
            let d = st.end_epoch(0.9);
            assert_eq!(d.stop, i == 20);
        }
        assert_eq!(st.best_epoch(), Some(0));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.lr_reduce_factor = 1.0;
        assert!(c.validate().is_err());
        c = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }
}
