//! Localize, crop, segment and regress stenosis severity in one pass.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gradcore::{checkpoint, Tensor, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StenosisError};
use crate::geometry::{crop_box, pool_to_nonoverlap, select_bbox, BBox, GridSpec};
use crate::items::two_channel;
use crate::metrics::{
    assessment_bias, auroc, dice_coefficient, fdr_at_threshold, localization_accuracy, RunMetrics,
    SIGNIFICANT_FRACTION,
};
use crate::models::{
    build, predict_classifier, predict_localizer, predict_segmenter, ModelSpec, Profile, Task,
};
use crate::synthdata::Sample;
use crate::train::{train, Objective, Target, TrainHooks, TrainItem, TrainReport};

/// Loss the segmenter was trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegLoss {
    Dice,
    Mwce,
}

impl SegLoss {
    pub fn name(&self) -> &'static str {
        match self {
            SegLoss::Dice => "dice",
            SegLoss::Mwce => "mwce",
        }
    }
}

/// Where the classifier weights come from.
#[derive(Clone, Debug, PartialEq)]
pub enum ClassifierInit {
    Checkpoint(PathBuf),
    Fresh { seed: u64 },
}

#[derive(Clone, Debug)]
pub struct PipelineModel {
    pub profile: Profile,
    pub variant: SegLoss,
    pub localizer: ModelSpec<f32>,
    pub segmenter: ModelSpec<f32>,
    pub classifier: ModelSpec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StenosisReport {
    pub bbox: BBox,
    /// `[B, B]` lesion probabilities in crop coordinates.
    pub soft_mask: Tensor<f32>,
    /// Raw regression output; may fall outside [0, 1].
    pub fraction: f64,
    /// `fraction ≥ 0.7`.
    pub significant: bool,
    pub inference_seconds: f64,
}

fn check_stage(stage: Task, model: &ModelSpec<f32>, profile: &Profile) -> Result<()> {
    let g = &profile.grid;
    let (input, output): (Vec<usize>, Vec<usize>) = match stage {
        Task::Localizer => (vec![1, g.image_size, g.image_size], vec![1, g.k(), g.k()]),
        Task::Segmenter => (vec![1, g.box_size, g.box_size], vec![1, g.box_size, g.box_size]),
        Task::Classifier => (vec![2, g.box_size, g.box_size], vec![1]),
    };
    if model.task != stage || model.input_shape != input || model.output_shape != output {
        return Err(StenosisError::in_stage(stage.group())(StenosisError::invalid(format!(
            "expected {:?} -> {:?}, got {:?} {:?} -> {:?}",
            input, output, model.task, model.input_shape, model.output_shape
        ))));
    }
    Ok(())
}

impl PipelineModel {
    /// Composes three trained stages and freezes localizer and segmenter.
    pub fn new(
        profile: Profile,
        variant: SegLoss,
        mut localizer: ModelSpec<f32>,
        mut segmenter: ModelSpec<f32>,
        classifier: ModelSpec<f32>,
    ) -> Result<Self> {
        check_stage(Task::Localizer, &localizer, &profile)?;
        check_stage(Task::Segmenter, &segmenter, &profile)?;
        check_stage(Task::Classifier, &classifier, &profile)?;
        localizer.graph.freeze_group(Task::Localizer.group());
        segmenter.graph.freeze_group(Task::Segmenter.group());
        Ok(PipelineModel { profile, variant, localizer, segmenter, classifier })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.profile.grid
    }

    /// Predicted `B×B` box for one `S×S` image.
    pub fn localize(&self, image: &Tensor<f32>) -> Result<BBox> {
        let stage = StenosisError::in_stage("localizer");
        let conf = predict_localizer(&self.localizer, image).map_err(stage)?;
        let pooled = pool_to_nonoverlap(self.grid(), &conf).map_err(StenosisError::in_stage("localizer"))?;
        select_bbox(self.grid(), &pooled).map_err(StenosisError::in_stage("localizer"))
    }

    /// Cropped image and its soft mask.
    pub fn segment(&self, image: &Tensor<f32>, bbox: &BBox) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let crop = crop_box(image, bbox).map_err(StenosisError::in_stage("crop"))?;
        let mask = predict_segmenter(&self.segmenter, &crop).map_err(StenosisError::in_stage("segmenter"))?;
        Ok((crop, mask))
    }

    pub fn classify(&self, crop: &Tensor<f32>, mask: &Tensor<f32>) -> Result<f64> {
        let input = two_channel(crop, mask).map_err(StenosisError::in_stage("classifier"))?;
        predict_classifier(&self.classifier, &input).map_err(StenosisError::in_stage("classifier"))
    }

    /// Classifier input `[2, B, B]` for an image after localization and
    /// segmentation.
    pub fn classifier_input(&self, image: &Tensor<f32>) -> Result<(BBox, Tensor<f32>)> {
        let bbox = self.localize(image)?;
        let (crop, mask) = self.segment(image, &bbox)?;
        Ok((bbox, two_channel(&crop, &mask)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&self.localizer.graph, dir.join("localizer.ckpt"))?;
        checkpoint::save(&self.segmenter.graph, dir.join("segmenter.ckpt"))?;
        checkpoint::save(&self.classifier.graph, dir.join("classifier.ckpt"))?;
        Ok(())
    }
}

/// Builds the stage's network for `profile` and loads `path` into it.
pub fn load_stage(task: Task, profile: &Profile, path: &Path) -> Result<ModelSpec<f32>> {
    let stage = StenosisError::in_stage(task.group());
    if !path.is_file() {
        return Err(stage(StenosisError::invalid(format!("checkpoint {} not found", path.display()))));
    }
    let mut model = build::<f32>(task, profile, 0).map_err(StenosisError::in_stage(task.group()))?;
    checkpoint::load(&mut model.graph, path).map_err(|e| stage(e.into()))?;
    Ok(model)
}

/// Loads localizer and segmenter checkpoints and a classifier, with the
/// first two frozen.
pub fn assemble(loc: &Path, seg: &Path, cls: &ClassifierInit, variant: SegLoss, profile: &Profile) -> Result<PipelineModel> {
    let localizer = load_stage(Task::Localizer, profile, loc)?;
    let segmenter = load_stage(Task::Segmenter, profile, seg)?;
    let classifier = match cls {
        ClassifierInit::Checkpoint(path) => load_stage(Task::Classifier, profile, path)?,
        ClassifierInit::Fresh { seed } => build(Task::Classifier, profile, *seed)?,
    };
    PipelineModel::new(profile.clone(), variant, localizer, segmenter, classifier)
}

/// Full inference on one contrast-standardized `S×S` image.
pub fn run_end_to_end(model: &PipelineModel, image: &Tensor<f32>) -> Result<StenosisReport> {
    let clock = Instant::now();
    let s = model.grid().image_size;
    if image.len() != s * s {
        return Err(StenosisError::invalid(format!("expected a {s}x{s} image, got {:?}", image.shape())));
    }
    let image = image.clone().reshape([s, s])?;
    let bbox = model.localize(&image)?;
    let (crop, soft_mask) = model.segment(&image, &bbox)?;
    let fraction = model.classify(&crop, &soft_mask)?;
    Ok(StenosisReport {
        bbox,
        soft_mask,
        fraction,
        significant: fraction >= SIGNIFICANT_FRACTION,
        inference_seconds: clock.elapsed().as_secs_f64(),
    })
}

/// Classifier items from the frozen stages: predicted box, crop and soft
/// mask, against the true fraction.
pub fn end_to_end_items(model: &PipelineModel, samples: &[Sample]) -> Result<Vec<TrainItem>> {
    samples
        .iter()
        .map(|s| {
            let (_, input) = model.classifier_input(&s.image)?;
            Ok(TrainItem { input, target: Target::Fraction(s.stenosis_fraction()) })
        })
        .collect()
}

/// Classifier items from crops centered on the true stenosis, with the
/// segmenter's soft mask as second channel.
pub fn oracle_items(segmenter: &ModelSpec<f32>, grid: &GridSpec, samples: &[Sample]) -> Result<Vec<TrainItem>> {
    centered_items(grid, samples, |crop, _| {
        predict_segmenter(segmenter, crop).map_err(StenosisError::in_stage("segmenter"))
    })
}

/// As [`oracle_items`] with the true lesion mask; the standalone
/// classification setting.
pub fn ground_truth_items(grid: &GridSpec, samples: &[Sample]) -> Result<Vec<TrainItem>> {
    centered_items(grid, samples, |_, lesion| Ok(lesion.clone()))
}

fn centered_items(
    grid: &GridSpec,
    samples: &[Sample],
    mask: impl Fn(&Tensor<f32>, &Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<Vec<TrainItem>> {
    samples
        .iter()
        .map(|s| {
            let bbox = BBox::centered_on(grid, s.point);
            let crop = crop_box(&s.image, &bbox)?;
            let m = mask(&crop, &crop_box(&s.lesion, &bbox)?)?;
            Ok(TrainItem { input: two_channel(&crop, &m)?, target: Target::Fraction(s.stenosis_fraction()) })
        })
        .collect()
}

/// Fine-tunes only the classifier on precomputed items.
pub fn train_classifier_on<'a>(
    classifier: &mut ModelSpec<f32>,
    train_items: &Vec<TrainItem>,
    val_items: &'a Vec<TrainItem>,
    config: &TrainConfig,
    log: Option<&'a mut dyn Write>,
) -> Result<TrainReport> {
    static MSE: Objective = Objective::Mse;
    let mut hooks = TrainHooks::with_validation(val_items, &MSE, config.batch_size);
    hooks.log = log;
    train(classifier, train_items, &MSE, config, false, hooks)
}

/// Trains the classifier stage of the pipeline end to end. Localizer and
/// segmenter only run forward, so their weights cannot change.
pub fn train_end_to_end(
    model: &mut PipelineModel,
    train_samples: &[Sample],
    val_samples: &[Sample],
    config: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    let train_items = end_to_end_items(model, train_samples)?;
    let val_items = end_to_end_items(model, val_samples)?;
    train_classifier_on(&mut model.classifier, &train_items, &val_items, config, log.map(|l| -> &mut dyn Write { l }))
}

/// Regression outputs for precomputed classifier items.
pub fn predict_items(classifier: &ModelSpec<f32>, items: &[TrainItem]) -> Result<Vec<f64>> {
    items.iter().map(|it| predict_classifier(classifier, &it.input)).collect()
}

/// AUROC, FDR and bias of fraction predictions against the truth.
pub fn classification_metrics(seed: u64, preds: &[f64], truths: &[f64]) -> Result<RunMetrics> {
    let labels: Vec<bool> = truths.iter().map(|&t| t >= SIGNIFICANT_FRACTION).collect();
    let pct = |v: &[f64]| v.iter().map(|x| 100.0 * x).collect::<Vec<_>>();
    Ok(RunMetrics {
        seed,
        localization_accuracy: None,
        dice: None,
        auroc: auroc(preds, &labels).ok(),
        fdr: Some(fdr_at_threshold(preds, truths, SIGNIFICANT_FRACTION)?.value),
        assessment_bias: Some(assessment_bias(&pct(preds), &pct(truths))?.mean),
    })
}

/// Per-sample outputs of an end-to-end evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: RunMetrics,
    pub boxes: Vec<BBox>,
    pub fractions: Vec<f64>,
    pub seconds: Vec<f64>,
}

/// Runs the full pipeline on every sample. Dice compares the soft mask to
/// the true lesion inside the predicted box.
pub fn evaluate_end_to_end(model: &PipelineModel, samples: &[Sample], seed: u64) -> Result<Evaluation> {
    let mut boxes = Vec::with_capacity(samples.len());
    let mut fractions = Vec::with_capacity(samples.len());
    let mut seconds = Vec::with_capacity(samples.len());
    let mut dice = 0.0;
    for s in samples {
        let r = run_end_to_end(model, &s.image)?;
        let truth = crop_box(&s.lesion, &r.bbox)?;
        let to64 = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        dice += dice_coefficient(&to64(&r.soft_mask), &to64(&truth))?;
        boxes.push(r.bbox);
        fractions.push(r.fraction);
        seconds.push(r.inference_seconds);
    }
    let points: Vec<_> = samples.iter().map(|s| s.point).collect();
    let truths: Vec<f64> = samples.iter().map(Sample::stenosis_fraction).collect();
    let mut metrics = classification_metrics(seed, &fractions, &truths)?;
    metrics.localization_accuracy = Some(localization_accuracy(&boxes, &points)?);
    metrics.dice = Some(dice / samples.len() as f64);
    Ok(Evaluation { metrics, boxes, fractions, seconds })
}

/// Segments and classifies crops centered on the true stenosis.
pub fn oracle_localized_eval(
    segmenter: &ModelSpec<f32>,
    classifier: &ModelSpec<f32>,
    grid: &GridSpec,
    samples: &[Sample],
    seed: u64,
) -> Result<RunMetrics> {
    let items = oracle_items(segmenter, grid, samples)?;
    let preds = predict_items(classifier, &items)?;
    let truths: Vec<f64> = samples.iter().map(Sample::stenosis_fraction).collect();
    let mut m = classification_metrics(seed, &preds, &truths)?;
    m.localization_accuracy = Some(1.0);
    Ok(m)
}

/// Mean dice of the segmenter on crops centered on the true stenosis.
pub fn segmentation_dice(segmenter: &ModelSpec<f32>, grid: &GridSpec, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(StenosisError::invalid("no samples to segment"));
    }
    let mut total = 0.0;
    for s in samples {
        let bbox = BBox::centered_on(grid, s.point);
        let pred = predict_segmenter(segmenter, &crop_box(&s.image, &bbox)?)?;
        let truth = crop_box(&s.lesion, &bbox)?;
        let p: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
        let t: Vec<f64> = truth.data().iter().map(|&v| v as f64).collect();
        total += dice_coefficient(&p, &t)?;
    }
    Ok(total / samples.len() as f64)
}

/// Fraction of samples whose localizer box holds the stenosis at the
/// grid's box size.
pub fn containment(localizer: &ModelSpec<f32>, grid: &GridSpec, samples: &[Sample]) -> Result<f64> {
    let mut boxes = Vec::with_capacity(samples.len());
    for s in samples {
        let conf = predict_localizer(localizer, &s.image)?;
        boxes.push(select_bbox(grid, &pool_to_nonoverlap(grid, &conf)?)?);
    }
    let points: Vec<_> = samples.iter().map(|s| s.point).collect();
    localization_accuracy(&boxes, &points)
}
