use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use image::{Rgb, RgbImage};

use stenosis::experiment::{objective_for, train_stage, Splits};
use stenosis::gradsuite::run_suite;
use stenosis::items::{ClassifierItems, LocalizerItems, SegmenterItems};
use stenosis::metrics::{EvaluationReport, RunMetrics};
use stenosis::models::ProfileName;
use stenosis::pipeline::{
    assemble, classification_metrics, containment, evaluate_end_to_end, load_stage, oracle_localized_eval,
    ground_truth_items, predict_items, run_end_to_end, segmentation_dice, train_end_to_end, ClassifierInit, SegLoss,
};
use stenosis::synthdata::{
    contrast_standardize, generate_dataset, load_dataset, resize_to, stratified_split, write_dataset, AugmentConfig,
    DatasetConfig, Sample, Split, SplitSpec,
};
use stenosis::train::Objective;
use stenosis::{GridSpec, PipelineConfig, Profile, Task};

#[derive(Parser)]
#[command(name = "stenosis", version, about = "Synthetic angiogram stenosis pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen(GenArgs),
    /// Train one stage, or the classifier end to end.
    Train(TrainArgs),
    /// Evaluate checkpoints and write a mean ± std report.
    Eval(EvalArgs),
    /// Draw the predicted box and mask over an image.
    Overlay(OverlayArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

impl From<ProfileArg> for ProfileName {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => ProfileName::Desk,
            ProfileArg::Paper => ProfileName::Paper,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Loc,
    Seg,
    Cls,
    E2e,
    /// Segment and classify crops centered on the true stenosis.
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum SegLossArg {
    Dice,
    Mwce,
}

impl From<SegLossArg> for SegLoss {
    fn from(s: SegLossArg) -> Self {
        match s {
            SegLossArg::Dice => SegLoss::Dice,
            SegLossArg::Mwce => SegLoss::Mwce,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "desk")]
    profile: ProfileArg,
    /// Lowest nominal stenosis fraction.
    #[arg(long, default_value_t = 0.2)]
    severity_min: f64,
    /// Highest nominal stenosis fraction.
    #[arg(long, default_value_t = 0.9)]
    severity_max: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long, value_enum, default_value = "dice")]
    seg_loss: SegLossArg,
    /// JSON configuration; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Directory with pretrained stage checkpoints (e2e only).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Overrides the training and initialization seeds.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long, value_enum, default_value = "dice")]
    seg_loss: SegLossArg,
    /// Checkpoint directory, or a parent of `seed0`, `seed1`, … when
    /// evaluating several runs.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OverlayArgs {
    /// Directory with localizer, segmenter and classifier checkpoints.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "dice")]
    seg_loss: SegLossArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check every op, loss and network.
    #[arg(long, required = true)]
    all: bool,
    /// Random draws per op and per loss.
    #[arg(long, default_value_t = 20)]
    instances: usize,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let config = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    config.validate()?;
    Ok(config)
}

fn load_splits(dir: &Path, grid: &GridSpec) -> Result<Splits> {
    let mut splits = Splits::default();
    for (s, split) in load_dataset(dir)? {
        if s.size() != grid.image_size {
            bail!("dataset image {} is {} px, profile expects {}", s.id, s.size(), grid.image_size);
        }
        match split {
            Split::Train => splits.train.push(s),
            Split::Val => splits.val.push(s),
            Split::Test => splits.test.push(s),
        }
    }
    Ok(splits)
}

fn stage_file(task: Task) -> &'static str {
    match task {
        Task::Localizer => "localizer.ckpt",
        Task::Segmenter => "segmenter.ckpt",
        Task::Classifier => "classifier.ckpt",
    }
}

fn gen(args: GenArgs) -> Result<()> {
    let grid = Profile::by_name(args.profile.into()).grid;
    let config = DatasetConfig { count: args.n, seed: args.seed, grid, severity: (args.severity_min, args.severity_max) };
    let samples = generate_dataset(&config)?;
    let spec = SplitSpec { seed: args.seed, ..SplitSpec::default() };
    let pcts: Vec<f64> = samples.iter().map(|s| s.stenosis_pct).collect();
    let assignment = stratified_split(&pcts, &spec)?;
    write_dataset(&args.out, &samples, &assignment, &spec)?;
    eprintln!(
        "wrote {} samples ({} train / {} val / {} test) to {}",
        samples.len(),
        assignment.train.len(),
        assignment.val.len(),
        assignment.test.len(),
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.init_seed = seed;
        for t in [&mut config.localizer, &mut config.segmenter, &mut config.classifier, &mut config.end_to_end] {
            t.seed = seed;
        }
    }
    let profile = config.profile()?;
    let grid = profile.grid;
    let splits = load_splits(&args.data, &grid)?;
    fs::create_dir_all(&args.out)?;
    config.save(&args.out.join("config.json"))?;
    let variant: SegLoss = args.seg_loss.into();
    let aug = config.augment.clone();
    let none = AugmentConfig::none();
    let (name, seed) = (task_name(args.task), config.init_seed);
    let mut log = BufWriter::new(fs::File::create(args.out.join(format!("{name}.log.jsonl")))?);
    let report = match args.task {
        TaskArg::Loc => {
            let tr = LocalizerItems { samples: &splits.train, grid, augment: aug };
            let va = LocalizerItems { samples: &splits.val, grid, augment: none };
            let obj = Objective::Grid { w_pos: grid.positive_weight() };
            let (m, r) = train_stage(Task::Localizer, &profile, seed, &tr, &va, &obj, &config.localizer, Some(&mut log))?;
            gradcore::checkpoint::save(&m.graph, args.out.join(stage_file(Task::Localizer)))?;
            r
        }
        TaskArg::Seg => {
            let tr = SegmenterItems { samples: &splits.train, grid, augment: aug };
            let va = SegmenterItems { samples: &splits.val, grid, augment: none };
            let obj = objective_for(variant, &config);
            let (m, r) = train_stage(Task::Segmenter, &profile, seed, &tr, &va, &obj, &config.segmenter, Some(&mut log))?;
            gradcore::checkpoint::save(&m.graph, args.out.join(stage_file(Task::Segmenter)))?;
            r
        }
        TaskArg::Cls => {
            let tr = ClassifierItems { samples: &splits.train, grid, augment: aug };
            let va = ClassifierItems { samples: &splits.val, grid, augment: none };
            let (m, r) =
                train_stage(Task::Classifier, &profile, seed, &tr, &va, &Objective::Mse, &config.classifier, Some(&mut log))?;
            gradcore::checkpoint::save(&m.graph, args.out.join(stage_file(Task::Classifier)))?;
            r
        }
        TaskArg::E2e => {
            let pre = args.ckpt.as_ref().ok_or_else(|| anyhow!("--task e2e needs --ckpt with pretrained stages"))?;
            let cls = if config.warm_start_classifier {
                ClassifierInit::Checkpoint(pre.join(stage_file(Task::Classifier)))
            } else {
                ClassifierInit::Fresh { seed }
            };
            let mut model = assemble(
                &pre.join(stage_file(Task::Localizer)),
                &pre.join(stage_file(Task::Segmenter)),
                &cls,
                variant,
                &profile,
            )?;
            let r = train_end_to_end(&mut model, &splits.train, &splits.val, &config.end_to_end, Some(&mut log))?;
            model.save(&args.out)?;
            r
        }
        TaskArg::Oracle => bail!("oracle is an evaluation mode; train `cls` or `e2e` instead"),
    };
    log.flush()?;
    eprintln!(
        "{name}: {} epochs, best validation loss {:.6} at epoch {}{}",
        report.history.len(),
        report.best_val_loss,
        report.best_epoch,
        if report.stopped_early { " (early stop)" } else { "" }
    );
    Ok(())
}

fn task_name(t: TaskArg) -> &'static str {
    match t {
        TaskArg::Loc => "loc",
        TaskArg::Seg => "seg",
        TaskArg::Cls => "cls",
        TaskArg::E2e => "e2e",
        TaskArg::Oracle => "oracle",
    }
}

/// One checkpoint directory per run: `DIR/seed{i}` when present, `DIR`
/// itself for a single run.
fn run_dirs(dir: &Path, seeds: usize) -> Result<Vec<(u64, PathBuf)>> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let nested: Vec<(u64, PathBuf)> = (0..seeds as u64).map(|i| (i, dir.join(format!("seed{i}")))).collect();
    if nested.iter().all(|(_, d)| d.is_dir()) {
        return Ok(nested);
    }
    if seeds == 1 {
        return Ok(vec![(0, dir.to_path_buf())]);
    }
    bail!("{} has no seed0..seed{} run directories for --seeds {seeds}", dir.display(), seeds - 1)
}

fn eval_one(task: TaskArg, dir: &Path, seed: u64, variant: SegLoss, profile: &Profile, test: &[Sample]) -> Result<RunMetrics> {
    let grid = profile.grid;
    let stage = |t: Task| load_stage(t, profile, &dir.join(stage_file(t)));
    Ok(match task {
        TaskArg::Loc => RunMetrics {
            seed,
            localization_accuracy: Some(containment(&stage(Task::Localizer)?, &grid, test)?),
            ..RunMetrics::default()
        },
        TaskArg::Seg => {
            RunMetrics { seed, dice: Some(segmentation_dice(&stage(Task::Segmenter)?, &grid, test)?), ..RunMetrics::default() }
        }
        TaskArg::Cls => {
            let cls = stage(Task::Classifier)?;
            let items = ground_truth_items(&grid, test)?;
            let truths: Vec<f64> = test.iter().map(Sample::stenosis_fraction).collect();
            classification_metrics(seed, &predict_items(&cls, &items)?, &truths)?
        }
        TaskArg::Oracle => {
            oracle_localized_eval(&stage(Task::Segmenter)?, &stage(Task::Classifier)?, &grid, test, seed)?
        }
        TaskArg::E2e => {
            let model = assemble(
                &dir.join(stage_file(Task::Localizer)),
                &dir.join(stage_file(Task::Segmenter)),
                &ClassifierInit::Checkpoint(dir.join(stage_file(Task::Classifier))),
                variant,
                profile,
            )?;
            evaluate_end_to_end(&model, test, seed)?.metrics
        }
    })
}

fn eval(args: EvalArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let profile = config.profile()?;
    let splits = load_splits(&args.data, &profile.grid)?;
    if splits.test.is_empty() {
        bail!("{} has no test samples", args.data.display());
    }
    let mut runs = Vec::new();
    for (seed, dir) in run_dirs(&args.ckpt, args.seeds)? {
        let m = eval_one(args.task, &dir, seed, args.seg_loss.into(), &profile, &splits.test)
            .with_context(|| format!("evaluating {}", dir.display()))?;
        runs.push(m);
    }
    let report = EvaluationReport::new(task_name(args.task), runs)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;
    print!("{}", report.render());
    Ok(())
}

fn load_gray(path: &Path) -> Result<gradcore::Tensor<f32>> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.into_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
    Ok(gradcore::Tensor::new([h as usize, w as usize], data)?)
}

fn overlay(args: OverlayArgs) -> Result<()> {
    let config = load_config(args.config.as_deref())?;
    let profile = config.profile()?;
    let s = profile.grid.image_size;
    let model = assemble(
        &args.ckpt.join(stage_file(Task::Localizer)),
        &args.ckpt.join(stage_file(Task::Segmenter)),
        &ClassifierInit::Checkpoint(args.ckpt.join(stage_file(Task::Classifier))),
        args.seg_loss.into(),
        &profile,
    )?;
    let raw = load_gray(&args.image)?;
    let (standardized, constant) = contrast_standardize(&raw);
    if constant {
        eprintln!("warning: constant image");
    }
    let image = resize_to(&standardized, s);
    let report = run_end_to_end(&model, &image)?;

    let mut canvas = RgbImage::from_fn(s as u32, s as u32, |x, y| {
        let v = (image.at2(y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([v, v, v])
    });
    let b = report.bbox;
    for r in 0..b.size {
        for c in 0..b.size {
            let p = report.soft_mask.at2(r, c);
            if p > 0.5 {
                let px = canvas.get_pixel_mut((b.col + c) as u32, (b.row + r) as u32);
                let a = 0.5 * p;
                px.0[0] = (px.0[0] as f32 * (1.0 - a) + 255.0 * a) as u8;
                px.0[1] = (px.0[1] as f32 * (1.0 - a)) as u8;
                px.0[2] = (px.0[2] as f32 * (1.0 - a)) as u8;
            }
        }
    }
    let green = Rgb([0, 220, 0]);
    for i in 0..b.size {
        for t in 0..2.min(b.size) {
            for (r, c) in [(b.row + t, b.col + i), (b.row + b.size - 1 - t, b.col + i), (b.row + i, b.col + t), (b.row + i, b.col + b.size - 1 - t)] {
                canvas.put_pixel(c as u32, r as u32, green);
            }
        }
    }
    canvas.save(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "{}",
        serde_json::json!({
            "box": {"row": b.row, "col": b.col, "size": b.size},
            "stenosis_fraction": report.fraction,
            "significant": report.significant,
            "inference_seconds": report.inference_seconds,
        })
    );
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    if !args.all {
        bail!("only --all is supported");
    }
    let reports = run_suite(args.instances)?;
    let mut ok = true;
    for r in &reports {
        if !r.pass {
            ok = false;
            println!("FAIL {} max rel {:.3e} inconclusive {}", r.label, r.max_rel_error, r.inconclusive);
        }
    }
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("{} checks, {} failed, worst relative error {worst:.3e}", reports.len(), reports.iter().filter(|r| !r.pass).count());
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Overlay(a) => overlay(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
