//! Mini-batch training with validation-driven learning-rate reduction,
//! early stopping and best-weight restoration.

use std::io::Write;
use std::time::Instant;

use gradcore::{optimizer_step, Mode, OptimizerState, Tensor, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StenosisError};
use crate::geometry::PixelPoint;
use crate::losses::{dice_loss_logits, mse_loss, mwce_loss, weighted_grid_bce, MwceParams};
use crate::models::ModelSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    Grid { w_pos: f64 },
    Dice { eps: f64 },
    Mwce(MwceParams),
    Mse,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    /// `[1, k, k]` window labels.
    Grid(Tensor<f32>),
    /// `[1, B, B]` masks and the stenosis point in crop coordinates.
    Mask { lesion: Tensor<f32>, silhouette: Tensor<f32>, center: PixelPoint },
    /// Stenosis fraction.
    Fraction(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    /// `[C, H, W]`.
    pub input: Tensor<f32>,
    pub target: Target,
}

/// Training examples, optionally augmented when an RNG is supplied.
pub trait ItemSource {
    fn len(&self) -> usize;
    fn item(&self, index: usize, rng: Option<&mut ChaCha8Rng>) -> Result<TrainItem>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ItemSource for Vec<TrainItem> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn item(&self, index: usize, _: Option<&mut ChaCha8Rng>) -> Result<TrainItem> {
        Ok(self[index].clone())
    }
}

/// Mean per-item loss over a batch and its gradient with respect to the
/// network output.
pub fn batch_loss(objective: &Objective, output: &Tensor<f32>, targets: &[&Target]) -> Result<(f64, Tensor<f32>)> {
    let n = output.batch();
    if n != targets.len() {
        return Err(StenosisError::invalid("batch and targets differ in length"));
    }
    if let Objective::Mse = objective {
        let preds: Vec<f64> = output.data().iter().map(|&v| v as f64).collect();
        let truth = targets
            .iter()
            .map(|t| match t {
                Target::Fraction(f) => Ok(*f),
                _ => Err(StenosisError::invalid("MSE needs fraction targets")),
            })
            .collect::<Result<Vec<f64>>>()?;
        if preds.len() != n {
            return Err(StenosisError::invalid("MSE needs one output per item"));
        }
        let (loss, grad) = mse_loss(&preds, &truth)?;
        return Ok((loss, Tensor::new(output.shape().to_vec(), grad.iter().map(|&g| g as f32).collect())?));
    }
    let mut grads = Vec::with_capacity(n);
    let mut total = 0.0;
    for (i, target) in targets.iter().enumerate() {
        let o: Tensor<f64> = output.slice_batch(i..i + 1)?.cast();
        let (l, g) = match (objective, target) {
            (Objective::Grid { w_pos }, Target::Grid(y)) => weighted_grid_bce(&o, &y.cast().reshape(o.shape().to_vec())?, *w_pos)?,
            (Objective::Dice { eps }, Target::Mask { lesion, .. }) => {
                dice_loss_logits(&o, &lesion.cast().reshape(o.shape().to_vec())?, *eps)?
            }
            (Objective::Mwce(p), Target::Mask { lesion, silhouette, center }) => mwce_loss(
                &o,
                &lesion.cast().reshape(o.shape().to_vec())?,
                &silhouette.cast().reshape(o.shape().to_vec())?,
                *center,
                p,
            )?,
            _ => return Err(StenosisError::invalid(format!("target does not fit objective {objective:?}"))),
        };
        total += l;
        grads.push(g.map(|v| v / n as f64).cast::<f32>());
    }
    Ok((total / n as f64, Tensor::concat_batch(&grads)?))
}

fn stack_inputs(items: &[TrainItem]) -> Result<Tensor<f32>> {
    let inputs: Vec<Tensor<f32>> = items.iter().map(|it| it.input.clone()).collect();
    Ok(Tensor::stack(&inputs)?)
}

/// Mean inference-mode loss over a source (no augmentation).
pub fn evaluate_loss(model: &ModelSpec<f32>, source: &dyn ItemSource, objective: &Objective, batch: usize) -> Result<f64> {
    if source.is_empty() {
        return Err(StenosisError::invalid("empty validation split"));
    }
    let mut total = 0.0;
    let mut start = 0;
    while start < source.len() {
        let end = (start + batch.max(1)).min(source.len());
        let items = (start..end).map(|i| source.item(i, None)).collect::<Result<Vec<_>>>()?;
        let out = model.forward_inference(&stack_inputs(&items)?)?;
        let targets: Vec<&Target> = items.iter().map(|it| &it.target).collect();
        total += batch_loss(objective, &out, &targets)?.0 * items.len() as f64;
        start = end;
    }
    Ok(total / source.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
    pub improved: bool,
    pub lr_reduced: bool,
    pub skipped_steps: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Callbacks steering a training run.
pub struct TrainHooks<'a> {
    /// Validation loss after each epoch (lower is better).
    pub validate: Box<dyn FnMut(&ModelSpec<f32>, usize) -> Result<f64> + 'a>,
    /// Ends training after the epoch for which it returns true.
    pub stop_when: Option<Box<dyn Fn(&EpochRecord) -> bool + 'a>>,
    /// Receives one JSON line per epoch.
    pub log: Option<&'a mut dyn Write>,
}

impl<'a> TrainHooks<'a> {
    pub fn with_validation(source: &'a dyn ItemSource, objective: &'a Objective, batch: usize) -> Self {
        TrainHooks {
            validate: Box::new(move |m, _| evaluate_loss(m, source, objective, batch)),
            stop_when: None,
            log: None,
        }
    }
}

/// Trains `model` in place and leaves it holding the best-validation
/// weights. Augmentation is requested from `train` when `augment` is set.
pub fn train(
    model: &mut ModelSpec<f32>,
    source: &dyn ItemSource,
    objective: &Objective,
    config: &TrainConfig,
    augment: bool,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainReport> {
    config.validate()?;
    if source.is_empty() {
        return Err(StenosisError::invalid("empty training split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = OptimizerState::new(&model.graph, config)?;
    let mut best = model.graph.snapshot();
    let mut best_val = f64::INFINITY;
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..source.len()).collect();

    for epoch in 0..config.max_epochs {
        let clock = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let items = chunk
                .iter()
                .map(|&i| source.item(i, if augment { Some(&mut rng) } else { None }))
                .collect::<Result<Vec<_>>>()?;
            let x = stack_inputs(&items)?;
            let tape = model.graph.forward(std::slice::from_ref(&x), Mode::Train)?;
            let targets: Vec<&Target> = items.iter().map(|it| &it.target).collect();
            let (loss, upstream) = batch_loss(objective, model.graph.output(&tape), &targets)?;
            if !loss.is_finite() {
                return Err(StenosisError::Diverged { epoch });
            }
            loss_sum += loss * items.len() as f64;
            let grads = model.graph.backward(&tape, &upstream)?;
            model.graph.update_running_stats(&tape)?;
            optimizer_step(&mut model.graph, &grads, &mut state)?;
        }
        let val_loss = (hooks.validate)(model, epoch)?;
        if !val_loss.is_finite() {
            return Err(StenosisError::Diverged { epoch });
        }
        let lr = state.learning_rate();
        let decision = state.end_epoch(val_loss);
        if decision.improved {
            best = model.graph.snapshot();
            best_val = val_loss;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / source.len() as f64,
            val_loss,
            learning_rate: lr,
            improved: decision.improved,
            lr_reduced: decision.lr_reduced,
            skipped_steps: state.skipped_steps(),
            seconds: clock.elapsed().as_secs_f64(),
        };
        if let Some(log) = hooks.log.as_deref_mut() {
            serde_json::to_writer(&mut *log, &record)?;
            log.write_all(b"\n")?;
            log.flush()?;
        }
        let user_stop = hooks.stop_when.as_ref().is_some_and(|f| f(&record));
        history.push(record);
        if decision.stop {
            stopped_early = true;
            break;
        }
        if user_stop {
            break;
        }
    }
    model.graph.restore(&best)?;
    Ok(TrainReport { history, best_epoch: state.best_epoch().unwrap_or(0), best_val_loss: best_val, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_classifier, Profile};

    fn toy_items(n: usize) -> Vec<TrainItem> {
        (0..n)
            .map(|i| {
                let f = i as f64 / n as f64;
                TrainItem { input: Tensor::from_fn([2, 4, 4], |j| (f as f32) * ((j % 3) as f32)), target: Target::Fraction(f) }
            })
            .collect()
    }

    #[test]
    fn same_seed_same_history() {
        let items = toy_items(6);
        let cfg = TrainConfig { max_epochs: 3, seed: 5, ..TrainConfig::default() };
        let run = || {
            let mut m = build_classifier::<f32>(&Profile::mini(), 1).unwrap();
            let obj = Objective::Mse;
            let r = train(&mut m, &items, &obj, &cfg, false, TrainHooks::with_validation(&items, &obj, 2)).unwrap();
            (r.history.iter().map(|h| (h.train_loss, h.val_loss)).collect::<Vec<_>>(), m.graph.snapshot())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_split_is_rejected() {
        let mut m = build_classifier::<f32>(&Profile::mini(), 1).unwrap();
        let empty: Vec<TrainItem> = Vec::new();
        let items = toy_items(2);
        let r = train(&mut m, &empty, &Objective::Mse, &TrainConfig::default(), false, TrainHooks::with_validation(&items, &Objective::Mse, 2));
        assert!(r.is_err());
    }

    #[test]
    fn mismatched_target_is_rejected() {
        let out = Tensor::<f32>::zeros([1, 1, 3, 3]);
        let t = Target::Fraction(0.5);
        assert!(batch_loss(&Objective::Dice { eps: 1e-6 }, &out, &[&t]).is_err());
    }
}
