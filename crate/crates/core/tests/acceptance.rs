//! Acceptance criteria 1–9. Each test writes one `criterion N: PASS|FAIL`
//! line to stderr (outside the harness capture) and then asserts.
//!
//! Criteria 6 and 8 share one full desk-scale run (about half an hour on
//! one core).

use std::collections::BTreeMap;
use std::io::Write as _;
use std::sync::OnceLock;
use std::time::Instant;

use gradcore::{Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stenosis::experiment::{run_experiment, ExperimentReport, Workspace};
use stenosis::geometry::{pool_to_nonoverlap, select_bbox, Activation, ConfidenceGrid, PooledGrid};
use stenosis::gradsuite::run_suite;
use stenosis::losses::{dice_loss, mwce_loss, mwce_weight_map, weighted_grid_bce, MwceParams};
use stenosis::metrics::{auroc, dice_coefficient, EvaluationReport, RunMetrics};
use stenosis::models::{build, Profile, Task};
use stenosis::pipeline::{train_end_to_end, PipelineModel, SegLoss};
use stenosis::synthdata::{
    generate_dataset, measure_stenosis_oracle, stratified_split, stratum_of, write_dataset, DatasetConfig, Sample, SplitSpec,
};
use stenosis::train::{train, Objective, Target, TrainHooks, TrainItem};
use stenosis::{GridSpec, PipelineConfig, PixelPoint};

fn verdict(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} | {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn criterion_1_gradient_correctness() {
    let clock = Instant::now();
    let reports = run_suite(20).unwrap();
    let secs = clock.elapsed().as_secs_f64();
    let mut per_label: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &reports {
        *per_label.entry(r.label.as_str()).or_default() += 1;
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.pass).map(|r| r.label.clone()).collect();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let worst_abs = reports.iter().map(|r| r.max_abs_error).fold(0.0, f64::max);
    let losses = ["grid_bce", "dice", "mwce", "mwce_stop_gradient", "mse"];
    let enough = losses.iter().all(|l| per_label.get(l).copied().unwrap_or(0) >= 20)
        && per_label.iter().filter(|(l, _)| !losses.contains(l) && !["localizer", "segmenter", "classifier"].contains(l)).all(|(_, &n)| n >= 20);
    verdict(
        1,
        failed.is_empty() && enough && worst <= 1e-3 && secs < 120.0,
        &format!("{} checks over {} labels, failed {failed:?}, worst rel err {worst:.2e} (abs {worst_abs:.1e}, rel counted above 1e-6 abs), {secs:.1} s", reports.len(), per_label.len()),
    );
}

#[test]
fn criterion_2_closed_form_losses() {
    let ln2 = std::f64::consts::LN_2;
    let labels = Tensor::<f64>::from_fn([15, 15], |i| if i == 112 { 1.0 } else { 0.0 });
    let (bce, _) = weighted_grid_bce(&Tensor::zeros([15, 15]), &labels, 225.0).unwrap();
    let p = MwceParams::default();
    let z = Tensor::<f64>::zeros([128, 128]);
    let w_far = mwce_weight_map(&z, &z, PixelPoint::new(0, 0), &z, &p).unwrap().weight.at2(127, 127);
    let one = Tensor::<f64>::full([1, 1], 1.0);
    let w_center =
        mwce_weight_map(&one, &Tensor::zeros([1, 1]), PixelPoint::new(0, 0), &Tensor::full([1, 1], 0.5), &p).unwrap().weight.item();
    let mut sil = Tensor::<f64>::zeros([40, 40]);
    sil.set2(20, 35, 1.0);
    let w_sil = mwce_weight_map(&Tensor::zeros([40, 40]), &sil, PixelPoint::new(20, 20), &Tensor::zeros([40, 40]), &p)
        .unwrap()
        .weight
        .at2(20, 35);
    // 128·(1 + 10·e^{−15²/15²})
    let w_sil_exact = 128.0 * (1.0 + 10.0 * (-1f64).exp());
    let (mwce, _) = mwce_loss(&Tensor::zeros([1, 1]), &one, &Tensor::zeros([1, 1]), PixelPoint::new(0, 0), &p).unwrap();
    let errs = [
        rel(bce, 449.0 * ln2),
        rel(w_far, 1.0),
        rel(w_center, 705.5),
        rel(w_sil, w_sil_exact),
        rel(mwce, 705.5 * ln2),
    ];
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    verdict(
        2,
        worst <= 1e-9 && (w_sil - 598.89).abs() < 0.005,
        &format!("grid {bce:.6} (449 ln2), weights {w_far} / {w_center} / {w_sil:.4}, worst rel err {worst:.1e}"),
    );
}

/// Cell `(i, j)` takes the max over windows whose pixel span covers the
/// cell's whole pixel span.
fn coverage_oracle(spec: &GridSpec, conf: &ConfidenceGrid) -> Vec<f64> {
    let (k, n, t, w) = (spec.k(), spec.n(), spec.stride, spec.window);
    let mut out = vec![f64::NEG_INFINITY; n * n];
    for i in 0..n {
        for j in 0..n {
            for a in 0..k {
                for b in 0..k {
                    let rows = a * t <= i * t && i * t + t <= a * t + w;
                    let cols = b * t <= j * t && j * t + t <= b * t + w;
                    if rows && cols {
                        out[i * n + j] = out[i * n + j].max(conf.values[a * k + b]);
                    }
                }
            }
        }
    }
    out
}

fn brute_force_box(spec: &GridSpec, pooled: &PooledGrid) -> (usize, usize) {
    let (n, c) = (spec.n(), spec.c());
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..=n - c {
        for j in 0..=n - c {
            let mut s = 0.0;
            for di in 0..c {
                for dj in 0..c {
                    s += pooled.values[(i + di) * n + j + dj];
                }
            }
            if best.is_none_or(|(b, _, _)| s > b) {
                best = Some((s, i, j));
            }
        }
    }
    let (_, i, j) = best.unwrap();
    (i * spec.stride, j * spec.stride)
}

#[test]
fn criterion_3_decoder_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let specs = [GridSpec::paper(), GridSpec::desk(), GridSpec::desk().with_box_size(64).unwrap(), GridSpec::new(8, 4, 2, 4).unwrap()];
    let mut box_mismatch = 0;
    let mut ties = 0;
    for trial in 0..1000 {
        let spec = specs[trial % specs.len()];
        let n = spec.n();
        // Quarter steps keep every block sum exact, and ties common.
        let levels = if trial % 2 == 0 { 3 } else { 400 };
        let pooled = PooledGrid { side: n, values: (0..n * n).map(|_| rng.random_range(0..=levels) as f64 / 4.0).collect() };
        let b = select_bbox(&spec, &pooled).unwrap();
        let (r, c) = brute_force_box(&spec, &pooled);
        if (b.row, b.col) != (r, c) || b.size != spec.box_size {
            box_mismatch += 1;
        }
        if pooled.values.iter().filter(|&&v| v == pooled.values[0]).count() > 1 {
            ties += 1;
        }
    }
    let mut pool_mismatch = 0;
    for trial in 0..200 {
        let spec = specs[trial % specs.len()];
        let k = spec.k();
        let conf = ConfidenceGrid::new(k, (0..k * k).map(|_| rng.random::<f64>()).collect(), Activation::Probabilities).unwrap();
        if pool_to_nonoverlap(&spec, &conf).unwrap().values != coverage_oracle(&spec, &conf) {
            pool_mismatch += 1;
        }
    }
    verdict(
        3,
        box_mismatch == 0 && pool_mismatch == 0,
        &format!("select_bbox mismatches {box_mismatch}/1000 ({ties} grids with ties), pooling mismatches {pool_mismatch}/200"),
    );
}

fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

#[test]
fn criterion_4_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut auroc_err: f64 = 0.0;
    let mut auroc_sets = 0;
    for n in 2..=200 {
        for _ in 0..3 {
            let levels = rng.random_range(2..50);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            auroc_err = auroc_err.max((auroc(&scores, &labels).unwrap() - pairwise_auroc(&scores, &labels)).abs());
            auroc_sets += 1;
        }
    }

    let spec = SplitSpec::default();
    let mut split_violations = 0;
    for d in 0..1000u64 {
        let n = rng.random_range(1..400);
        let pcts: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=100.0)).collect();
        let a = stratified_split(&pcts, &SplitSpec { seed: d, ..spec.clone() }).unwrap();
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        if all != (0..n).collect::<Vec<_>>() {
            split_violations += 1;
            continue;
        }
        for s in 0..spec.thresholds.len() - 1 {
            let count = |idx: &[usize]| idx.iter().filter(|&&i| stratum_of(&spec, pcts[i]).unwrap() == s).count() as f64;
            let m = count(&a.train) + count(&a.val) + count(&a.test);
            for (got, ratio) in [(count(&a.train), 0.70), (count(&a.val), 0.15), (count(&a.test), 0.15)] {
                if (got - ratio * m).abs() > 1.0 {
                    split_violations += 1;
                }
            }
        }
    }

    let eps = 1e-6;
    let mut dice_err: f64 = 0.0;
    for _ in 0..500 {
        let len = rng.random_range(1..300);
        let p: Vec<f64> = (0..len).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let t: Vec<f64> = (0..len).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        if p.iter().sum::<f64>() + t.iter().sum::<f64>() == 0.0 {
            continue;
        }
        let d = dice_coefficient(&p, &t).unwrap();
        let (l, _) = dice_loss(&Tensor::new([len], p).unwrap(), &Tensor::new([len], t).unwrap(), eps).unwrap();
        dice_err = dice_err.max((d + l).abs());
    }
    verdict(
        4,
        auroc_err <= 1e-12 && split_violations == 0 && dice_err <= eps,
        &format!(
            "auroc max err {auroc_err:.1e} over {auroc_sets} sets, split violations {split_violations}/1000 datasets, dice vs loss max err {dice_err:.1e}"
        ),
    );
}

#[test]
fn criterion_5_generator_validity() {
    let config = DatasetConfig { count: 200, seed: 1000, ..DatasetConfig::default() };
    let samples = generate_dataset(&config).unwrap();
    let mut within = 0;
    let mut measured = 0;
    for s in &samples {
        if let Ok(m) = measure_stenosis_oracle(&s.lesion, &s.centerline) {
            measured += 1;
            if (m - s.stenosis_pct).abs() <= 3.0 {
                within += 1;
            }
        }
    }
    let frac = within as f64 / samples.len() as f64;

    let small = DatasetConfig { count: 12, seed: 7, ..DatasetConfig::default() };
    let write = || {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_dataset(&small).unwrap();
        let pcts: Vec<f64> = samples.iter().map(|s| s.stenosis_pct).collect();
        let spec = SplitSpec { seed: 7, ..SplitSpec::default() };
        write_dataset(dir.path(), &samples, &stratified_split(&pcts, &spec).unwrap(), &spec).unwrap();
        let mut files = BTreeMap::new();
        for entry in walk(dir.path()) {
            files.insert(entry.strip_prefix(dir.path()).unwrap().to_path_buf(), std::fs::read(&entry).unwrap());
        }
        files
    };
    let (a, b) = (write(), write());
    let identical = a == b && a.len() == 1 + 3 * 12;
    verdict(
        5,
        frac >= 0.95 && identical,
        &format!("{within}/200 within ±3 pp ({measured} measurable), byte-identical directories: {identical} ({} files)", a.len()),
    );
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn numbers(v: &serde_json::Value, out: &mut Vec<f64>) {
    match v {
        serde_json::Value::Number(n) => out.extend(n.as_f64()),
        serde_json::Value::Array(a) => a.iter().for_each(|x| numbers(x, out)),
        serde_json::Value::Object(o) => o.values().for_each(|x| numbers(x, out)),
        _ => {}
    }
}

fn desk_run() -> &'static ExperimentReport {
    static RUN: OnceLock<ExperimentReport> = OnceLock::new();
    RUN.get_or_init(|| {
        let seeds: Vec<u64> = (0..5).collect();
        let clock = Instant::now();
        let report = run_experiment(&PipelineConfig::desk_budget(), &seeds, &Workspace::none(), &mut |m| {
            let _ = std::io::stderr().write_all(format!("  [desk {:6.0}s] {m}\n", clock.elapsed().as_secs_f64()).as_bytes());
        })
        .unwrap();
        let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("desk_experiment.json");
        let _ = std::fs::write(path, serde_json::to_string_pretty(&report).unwrap());
        report
    })
}

fn mean_auroc(runs: &[RunMetrics]) -> f64 {
    runs.iter().map(|r| r.auroc.unwrap_or(f64::NAN)).sum::<f64>() / runs.len() as f64
}

#[test]
fn criterion_6_desk_training_sanity() {
    let r = desk_run();
    let oracle = mean_auroc(&r.oracle_runs);
    let dice_e2e = mean_auroc(&r.dice_e2e_runs);
    let mwce_e2e = mean_auroc(&r.mwce_e2e_runs);
    let mwce_wins = r
        .dice_e2e_runs
        .iter()
        .zip(&r.mwce_e2e_runs)
        .filter(|(d, m)| m.auroc.unwrap_or(f64::NAN) >= d.auroc.unwrap_or(f64::NAN))
        .count();
    let checks = [
        ("containment B=96 >= 0.85", r.containment >= 0.85),
        ("containment B=64 >= 0.70", r.containment_64 >= 0.70),
        ("dice >= 0.75", r.dice_dice >= 0.75),
        ("mwce dice within 0.10", (r.dice_dice - r.dice_mwce).abs() <= 0.10),
        ("oracle auroc >= 0.85", oracle >= 0.85),
        ("e2e auroc >= 0.70", dice_e2e >= 0.70 && mwce_e2e >= 0.70),
        ("e2e below oracle", dice_e2e < oracle),
        ("mwce >= dice e2e in >= 3/5", mwce_wins >= 3),
        ("wall time <= 45 min", r.total_seconds <= 45.0 * 60.0),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict(
        6,
        failed.is_empty(),
        &format!(
            "split {:?}; containment {:.3} / {:.3} (B=64); dice {:.3}, mwce {:.3}; auroc oracle {oracle:.3}, e2e dice {dice_e2e:.3}, mwce {mwce_e2e:.3}; mwce wins {mwce_wins}/5; {:.1} min; failed {failed:?}",
            r.counts,
            r.containment,
            r.containment_64,
            r.dice_dice,
            r.dice_mwce,
            r.total_seconds / 60.0
        ),
    );
}

#[test]
fn criterion_7_schedule_and_freeze() {
    let profile = Profile::mini();
    let items: Vec<TrainItem> = (0..4)
        .map(|i| TrainItem { input: Tensor::from_fn([2, 4, 4], |j| ((i + j) % 5) as f32 / 5.0), target: Target::Fraction(i as f64 / 4.0) })
        .collect();
    let mut model = build::<f32>(Task::Classifier, &profile, 1).unwrap();
    // Improves for three epochs, then stays flat forever.
    let rigged = [1.0, 0.9, 0.8];
    let hooks = TrainHooks {
        validate: Box::new(move |_, epoch| Ok(*rigged.get(epoch).unwrap_or(&0.8))),
        stop_when: None,
        log: None,
    };
    let config = TrainConfig { max_epochs: 100, ..TrainConfig::default() };
    let report = train(&mut model, &items, &Objective::Mse, &config, false, hooks).unwrap();
    let h = &report.history;
    let flat = h.iter().filter(|e| !e.improved).count();
    let first_cut = h.iter().position(|e| e.lr_reduced);
    let lr0 = h[0].learning_rate;
    let schedule_ok = report.stopped_early
        && h.len() == 23
        && flat == 20
        && first_cut == Some(7)
        && h[7].learning_rate == lr0
        && h[8].learning_rate == lr0 * 0.2
        && (3..8).all(|e| h[e].learning_rate == lr0);

    let mut pipe = PipelineModel::new(
        profile.clone(),
        SegLoss::Mwce,
        build(Task::Localizer, &profile, 2).unwrap(),
        build(Task::Segmenter, &profile, 3).unwrap(),
        build(Task::Classifier, &profile, 4).unwrap(),
    )
    .unwrap();
    let samples: Vec<Sample> = (0..6u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let lesion = Tensor::from_fn([8, 8], |j| if (j / 8) % 4 == 1 && rng.random_bool(0.5) { 1.0 } else { 0.0 });
            Sample {
                id: format!("mini{i}"),
                image: Tensor::from_fn([8, 8], |_| rng.random::<f32>()),
                silhouette: lesion.map(|v| 1.0 - v),
                lesion,
                point: PixelPoint::new(3, 4),
                stenosis_pct: 20.0 + 10.0 * i as f64,
                seed: i,
                centerline: Vec::new(),
            }
        })
        .collect();
    let (loc, seg, cls) = (pipe.localizer.graph.snapshot(), pipe.segmenter.graph.snapshot(), pipe.classifier.graph.snapshot());
    let cfg = TrainConfig { max_epochs: 1, learning_rate: 1e-2, ..TrainConfig::default() };
    train_end_to_end(&mut pipe, &samples[..4], &samples[4..], &cfg, None).unwrap();
    let frozen_ok = pipe.localizer.graph.snapshot() == loc && pipe.segmenter.graph.snapshot() == seg;
    let trained = pipe.classifier.graph.snapshot() != cls;
    verdict(
        7,
        schedule_ok && frozen_ok && trained,
        &format!(
            "{} epochs ({flat} without improvement), first ×0.2 after epoch {first_cut:?}, lr {lr0:e} -> {:e}; frozen stages bit-identical: {frozen_ok}, classifier updated: {trained}",
            h.len(),
            h.get(8).map_or(f64::NAN, |e| e.learning_rate)
        ),
    );
}

#[test]
fn criterion_8_inference_latency() {
    let r = desk_run();
    verdict(
        8,
        r.max_latency_seconds < 1.0,
        &format!("single-image end-to-end: max {:.3} s, mean {:.3} s", r.max_latency_seconds, r.mean_latency_seconds),
    );
}

#[test]
fn criterion_9_report_fidelity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let runs: Vec<RunMetrics> = (0..5)
        .map(|seed| RunMetrics {
            seed,
            localization_accuracy: Some(rng.random()),
            dice: Some(rng.random()),
            auroc: Some(rng.random()),
            fdr: Some(rng.random()),
            assessment_bias: Some(rng.random_range(-10.0..10.0)),
        })
        .collect();
    let report = EvaluationReport::new("e2e", runs.clone()).unwrap();
    let json: serde_json::Value = serde_json::to_value(&report).unwrap();
    let agg = &json["aggregate"];
    let has_mean_std = ["localization_accuracy", "dice", "auroc", "fdr", "assessment_bias"]
        .iter()
        .all(|m| agg[m]["mean"].is_f64() && agg[m]["std"].is_f64());
    let aurocs: Vec<f64> = runs.iter().map(|r| r.auroc.unwrap()).collect();
    let mean = aurocs.iter().sum::<f64>() / 5.0;
    let std = (aurocs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
    let values_ok = (agg["auroc"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12
        && (agg["auroc"]["std"].as_f64().unwrap() - std).abs() < 1e-12
        && json["per_seed"].as_array().unwrap().len() == 5
        && agg["runs"] == 5;
    let pva = &json["physician_visual_assessment"];
    let labeled = pva["source"] == "reported by the paper"
        && pva["fdr"] == 0.506
        && pva["assessment_bias_pct"] == 16.0
        && pva["assessment_bias_std_pct"] == 11.5;
    // Reference constants appear only under the labeled block.
    let mut measured = Vec::new();
    numbers(&json["aggregate"], &mut measured);
    numbers(&json["per_seed"], &mut measured);
    let measured_clean = !measured.iter().any(|v| [0.506, 16.0, 11.5].contains(v));
    let text = report.render();
    let text_ok = text.contains(" ± ") && text.contains("reported by the paper, not measured");
    verdict(
        9,
        has_mean_std && values_ok && labeled && measured_clean && text_ok,
        &format!("mean ± std fields {has_mean_std}, values {values_ok}, reference labeled {labeled}, kept apart {measured_clean}, text {text_ok}"),
    );
}
