//! The full protocol: generate, split, pretrain each stage, then fine-tune
//! and evaluate both end-to-end variants over several seeds.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use gradcore::{checkpoint, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Result, StenosisError};
use crate::items::{ClassifierItems, LocalizerItems, SegmenterItems};
use crate::metrics::{aggregate_runs, AggregateReport, RunMetrics};
use crate::models::{build, ModelSpec, Profile, Task};
use crate::pipeline::{
    classification_metrics, containment, end_to_end_items, evaluate_end_to_end, oracle_items, predict_items,
    segmentation_dice, train_classifier_on, ground_truth_items, PipelineModel, SegLoss,
};
use crate::synthdata::{generate_dataset, stratified_split, AugmentConfig, Sample, SplitAssignment};
use crate::train::{train, ItemSource, Objective, TrainHooks, TrainReport};

/// Samples grouped by split.
#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Splits {
    /// Moves samples into their splits, keeping assignment order.
    pub fn from_assignment(samples: Vec<Sample>, assignment: &SplitAssignment) -> Result<Self> {
        let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
        let mut take = |idx: &[usize]| {
            idx.iter()
                .map(|&i| slots.get_mut(i).and_then(Option::take).ok_or_else(|| StenosisError::invalid(format!("bad split index {i}"))))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Splits { train: take(&assignment.train)?, val: take(&assignment.val)?, test: take(&assignment.test)? })
    }

    pub fn generate(config: &PipelineConfig) -> Result<Self> {
        let samples = generate_dataset(&config.dataset)?;
        let pcts: Vec<f64> = samples.iter().map(|s| s.stenosis_pct).collect();
        let assignment = stratified_split(&pcts, &config.split)?;
        Self::from_assignment(samples, &assignment)
    }

    pub fn counts(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }
}

/// Where stage checkpoints and logs go. With `reuse` set, an existing
/// checkpoint is loaded instead of retraining.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub dir: Option<PathBuf>,
    pub reuse: bool,
}

impl Workspace {
    pub fn none() -> Self {
        Workspace { dir: None, reuse: false }
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }

    fn log(&self, name: &str) -> Result<Option<BufWriter<File>>> {
        match self.path(&format!("{name}.jsonl")) {
            Some(p) => Ok(Some(BufWriter::new(File::create(p)?))),
            None => Ok(None),
        }
    }
}

/// Trains one stage from scratch on item sources.
pub fn train_stage(
    task: Task,
    profile: &Profile,
    seed: u64,
    train_items: &dyn ItemSource,
    val_items: &dyn ItemSource,
    objective: &Objective,
    config: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<(ModelSpec<f32>, TrainReport)> {
    let mut model = build::<f32>(task, profile, seed)?;
    let mut hooks = TrainHooks::with_validation(val_items, objective, config.batch_size);
    hooks.log = log.map(|l| -> &mut dyn Write { l });
    let report = train(&mut model, train_items, objective, config, true, hooks).map_err(StenosisError::in_stage(task.group()))?;
    Ok((model, report))
}

fn cached_or_train(
    ws: &Workspace,
    name: &str,
    task: Task,
    profile: &Profile,
    fit: impl FnOnce(Option<&mut dyn Write>) -> Result<(ModelSpec<f32>, TrainReport)>,
) -> Result<(ModelSpec<f32>, Option<TrainReport>)> {
    let ckpt = ws.path(&format!("{name}.ckpt"));
    if let (true, Some(p)) = (ws.reuse, &ckpt) {
        if p.is_file() {
            return Ok((crate::pipeline::load_stage(task, profile, p)?, None));
        }
    }
    let mut log = ws.log(name)?;
    let (model, report) = fit(log.as_mut().map(|l| l as &mut dyn Write))?;
    if let Some(mut l) = log {
        l.flush()?;
    }
    if let Some(p) = ckpt {
        checkpoint::save(&model.graph, p)?;
    }
    Ok((model, Some(report)))
}

pub fn objective_for(variant: SegLoss, config: &PipelineConfig) -> Objective {
    match variant {
        SegLoss::Dice => Objective::Dice { eps: config.dice_eps },
        SegLoss::Mwce => Objective::Mwce(config.mwce.clone()),
    }
}

/// Stage networks trained on their own tasks.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub localizer: ModelSpec<f32>,
    pub dice_segmenter: ModelSpec<f32>,
    pub mwce_segmenter: ModelSpec<f32>,
    /// Trained on ground-truth masks.
    pub classifier: ModelSpec<f32>,
    pub reports: Vec<(String, TrainReport)>,
    pub seconds: Vec<(String, f64)>,
}

impl Pretrained {
    pub fn segmenter(&self, variant: SegLoss) -> &ModelSpec<f32> {
        match variant {
            SegLoss::Dice => &self.dice_segmenter,
            SegLoss::Mwce => &self.mwce_segmenter,
        }
    }
}

pub fn pretrain(
    config: &PipelineConfig,
    splits: &Splits,
    ws: &Workspace,
    progress: &mut dyn FnMut(&str),
) -> Result<Pretrained> {
    config.validate()?;
    let profile = config.profile()?;
    let grid = profile.grid;
    let aug = config.augment.clone();
    let none = AugmentConfig::none();
    let mut reports = Vec::new();
    let mut seconds = Vec::new();
    let seed = config.init_seed;

    let mut stage = |name: &str,
                     task: Task,
                     fit: &mut dyn FnMut(Option<&mut dyn Write>) -> Result<(ModelSpec<f32>, TrainReport)>|
     -> Result<ModelSpec<f32>> {
        progress(&format!("training {name}"));
        let clock = Instant::now();
        let (model, report) = cached_or_train(ws, name, task, &profile, |log| fit(log))?;
        let secs = clock.elapsed().as_secs_f64();
        if let Some(r) = report {
            progress(&format!(
                "{name}: {} epochs, best val {:.5} at epoch {}, {:.0} s",
                r.history.len(),
                r.best_val_loss,
                r.best_epoch,
                secs
            ));
            reports.push((name.to_string(), r));
        }
        seconds.push((name.to_string(), secs));
        Ok(model)
    };

    let grid_obj = Objective::Grid { w_pos: grid.positive_weight() };
    let localizer = stage("localizer", Task::Localizer, &mut |log| {
        let tr = LocalizerItems { samples: &splits.train, grid, augment: aug.clone() };
        let va = LocalizerItems { samples: &splits.val, grid, augment: none.clone() };
        train_stage(Task::Localizer, &profile, seed, &tr, &va, &grid_obj, &config.localizer, log)
    })?;
    let mut segmenters = Vec::new();
    for variant in [SegLoss::Dice, SegLoss::Mwce] {
        let obj = objective_for(variant, config);
        let name = format!("segmenter_{}", variant.name());
        segmenters.push(stage(&name, Task::Segmenter, &mut |log| {
            let tr = SegmenterItems { samples: &splits.train, grid, augment: aug.clone() };
            let va = SegmenterItems { samples: &splits.val, grid, augment: none.clone() };
            train_stage(Task::Segmenter, &profile, seed + 1, &tr, &va, &obj, &config.segmenter, log)
        })?);
    }
    let classifier = stage("classifier", Task::Classifier, &mut |log| {
        let tr = ClassifierItems { samples: &splits.train, grid, augment: aug.clone() };
        let va = ClassifierItems { samples: &splits.val, grid, augment: none.clone() };
        train_stage(Task::Classifier, &profile, seed + 2, &tr, &va, &Objective::Mse, &config.classifier, log)
    })?;
    let mwce_segmenter = segmenters.pop().expect("two segmenters");
    let dice_segmenter = segmenters.pop().expect("two segmenters");
    Ok(Pretrained { localizer, dice_segmenter, mwce_segmenter, classifier, reports, seconds })
}

/// Everything the desk acceptance bars are checked against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: PipelineConfig,
    pub counts: [usize; 3],
    /// Localizer containment on the test split at the configured box size
    /// and at 64 px.
    pub containment: f64,
    pub containment_64: f64,
    /// Segmentation dice on the test split with crops centered on the truth.
    pub dice_dice: f64,
    pub dice_mwce: f64,
    /// Ground-truth-mask classifier on oracle crops.
    pub standalone: RunMetrics,
    /// Oracle-localized runs with the dice segmenter, one per seed.
    pub oracle_runs: Vec<RunMetrics>,
    pub dice_e2e_runs: Vec<RunMetrics>,
    pub mwce_e2e_runs: Vec<RunMetrics>,
    pub oracle: AggregateReport,
    pub dice_e2e: AggregateReport,
    pub mwce_e2e: AggregateReport,
    /// Slowest and mean single-image end-to-end latency over the test split.
    pub max_latency_seconds: f64,
    pub mean_latency_seconds: f64,
    pub stage_seconds: Vec<(String, f64)>,
    pub total_seconds: f64,
}

/// Fine-tunes the classifier with `seed` and evaluates on the test split.
fn finetune(
    base: &ModelSpec<f32>,
    config: &PipelineConfig,
    seed: u64,
    train_items: &Vec<crate::train::TrainItem>,
    val_items: &Vec<crate::train::TrainItem>,
) -> Result<ModelSpec<f32>> {
    let mut cls = if config.warm_start_classifier {
        base.clone()
    } else {
        build(Task::Classifier, &config.profile()?, seed)?
    };
    let tc = TrainConfig { seed, ..config.end_to_end.clone() };
    train_classifier_on(&mut cls, train_items, val_items, &tc, None).map_err(StenosisError::in_stage("classifier"))?;
    Ok(cls)
}

pub fn run_experiment(
    config: &PipelineConfig,
    seeds: &[u64],
    ws: &Workspace,
    progress: &mut dyn FnMut(&str),
) -> Result<ExperimentReport> {
    if seeds.is_empty() {
        return Err(StenosisError::invalid("need at least one seed"));
    }
    let clock = Instant::now();
    config.validate()?;
    if let Some(d) = &ws.dir {
        std::fs::create_dir_all(d)?;
        config.save(&d.join("config.json"))?;
    }
    progress("generating dataset");
    let splits = Splits::generate(config)?;
    let counts = splits.counts();
    progress(&format!("split {counts:?}"));
    let pre = pretrain(config, &splits, ws, progress)?;
    let profile = config.profile()?;
    let grid = profile.grid;
    let mut stage_seconds = pre.seconds.clone();

    let t = Instant::now();
    let contain = containment(&pre.localizer, &grid, &splits.test)?;
    let contain_64 = containment(&pre.localizer, &grid.with_box_size(64)?, &splits.test)?;
    let dice_dice = segmentation_dice(&pre.dice_segmenter, &grid, &splits.test)?;
    let dice_mwce = segmentation_dice(&pre.mwce_segmenter, &grid, &splits.test)?;
    let gt_items = ground_truth_items(&grid, &splits.test)?;
    let truths: Vec<f64> = splits.test.iter().map(Sample::stenosis_fraction).collect();
    let standalone = classification_metrics(0, &predict_items(&pre.classifier, &gt_items)?, &truths)?;
    progress(&format!(
        "containment {contain:.3} (B=64 {contain_64:.3}), dice {dice_dice:.3} / mwce {dice_mwce:.3}, standalone auroc {:?}",
        standalone.auroc
    ));

    let oracle_train = oracle_items(&pre.dice_segmenter, &grid, &splits.train)?;
    let oracle_val = oracle_items(&pre.dice_segmenter, &grid, &splits.val)?;
    let oracle_test = oracle_items(&pre.dice_segmenter, &grid, &splits.test)?;
    let mut oracle_runs = Vec::new();
    for &seed in seeds {
        let cls = finetune(&pre.classifier, config, seed, &oracle_train, &oracle_val)?;
        let mut m = classification_metrics(seed, &predict_items(&cls, &oracle_test)?, &truths)?;
        m.localization_accuracy = Some(1.0);
        progress(&format!("oracle seed {seed}: auroc {:?}", m.auroc));
        oracle_runs.push(m);
    }
    stage_seconds.push(("oracle".into(), t.elapsed().as_secs_f64()));

    let mut latencies = Vec::new();
    let mut e2e = Vec::new();
    for variant in [SegLoss::Dice, SegLoss::Mwce] {
        let t = Instant::now();
        let mut model = PipelineModel::new(
            profile.clone(),
            variant,
            pre.localizer.clone(),
            pre.segmenter(variant).clone(),
            pre.classifier.clone(),
        )?;
        let tr = end_to_end_items(&model, &splits.train)?;
        let va = end_to_end_items(&model, &splits.val)?;
        let mut runs = Vec::new();
        for &seed in seeds {
            model.classifier = finetune(&pre.classifier, config, seed, &tr, &va)?;
            let eval = evaluate_end_to_end(&model, &splits.test, seed)?;
            progress(&format!("{} e2e seed {seed}: auroc {:?}", variant.name(), eval.metrics.auroc));
            latencies.extend(eval.seconds);
            if let Some(d) = &ws.dir {
                model.save(&d.join(format!("e2e_{}_seed{seed}", variant.name())))?;
            }
            runs.push(eval.metrics);
        }
        stage_seconds.push((format!("e2e_{}", variant.name()), t.elapsed().as_secs_f64()));
        e2e.push(runs);
    }
    let mwce_e2e_runs = e2e.pop().expect("two variants");
    let dice_e2e_runs = e2e.pop().expect("two variants");
    let agg = |runs: &[RunMetrics]| aggregate_runs(runs);
    let report = ExperimentReport {
        config: config.clone(),
        counts,
        containment: contain,
        containment_64: contain_64,
        dice_dice,
        dice_mwce,
        standalone,
        oracle: agg(&oracle_runs)?,
        dice_e2e: agg(&dice_e2e_runs)?,
        mwce_e2e: agg(&mwce_e2e_runs)?,
        oracle_runs,
        dice_e2e_runs,
        mwce_e2e_runs,
        max_latency_seconds: latencies.iter().cloned().fold(0.0, f64::max),
        mean_latency_seconds: latencies.iter().sum::<f64>() / latencies.len().max(1) as f64,
        stage_seconds,
        total_seconds: clock.elapsed().as_secs_f64(),
    };
    if let Some(d) = &ws.dir {
        std::fs::write(d.join("experiment.json"), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

/// Reads a stage checkpoint written by [`run_experiment`].
pub fn stage_checkpoint(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ckpt"))
}
