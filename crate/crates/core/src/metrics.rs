//! Evaluation metrics and multi-seed aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StenosisError};
use crate::geometry::{BBox, PixelPoint};

/// Stenosis fraction at or above which a case counts as significant.
pub const SIGNIFICANT_FRACTION: f64 = 0.7;

/// Physician visual assessment figures quoted from the published comparison.
/// These are literature constants, never measured by this crate.
pub mod pva_reference {
    pub const FDR: f64 = 0.506;
    pub const BIAS_PCT: f64 = 16.0;
    pub const BIAS_STD_PCT: f64 = 11.5;
    pub const SOURCE: &str = "reported by the paper";
}

/// Fraction of images whose box contains the point.
pub fn localization_accuracy(boxes: &[BBox], points: &[PixelPoint]) -> Result<f64> {
    if boxes.len() != points.len() {
        return Err(StenosisError::invalid("boxes and points differ in length"));
    }
    if boxes.is_empty() {
        return Err(StenosisError::invalid("localization accuracy of an empty set"));
    }
    let hits = boxes.iter().zip(points).filter(|(b, p)| b.contains(**p)).count();
    Ok(hits as f64 / boxes.len() as f64)
}

/// Hard dice after thresholding `pred` at 0.5; two empty masks score 1.
pub fn dice_coefficient(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(StenosisError::invalid("dice: mask sizes differ"));
    }
    let (mut inter, mut p, mut t) = (0usize, 0usize, 0usize);
    for (&u, &v) in pred.iter().zip(truth) {
        let (a, b) = (u >= 0.5, v >= 0.5);
        inter += (a && b) as usize;
        p += a as usize;
        t += b as usize;
    }
    if p + t == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + t) as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half. Computed from average ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(StenosisError::invalid("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(StenosisError::invalid("NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(StenosisError::Degenerate("AUROC undefined: labels contain a single class".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps tied mid-ranks integral.
    let mut rank2_sum_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        rank2_sum_pos += mid2 * order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        i = j + 1;
    }
    let u2 = rank2_sum_pos - (pos as u64) * (pos as u64 + 1);
    Ok(u2 as f64 / (2.0 * pos as f64 * neg as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_fractions(preds: &[f64], truths: &[f64], threshold: f64) -> Result<Self> {
        if preds.len() != truths.len() {
            return Err(StenosisError::invalid("predictions and truths differ in length"));
        }
        let mut c = ConfusionCounts::default();
        for (&p, &t) in preds.iter().zip(truths) {
            match (p >= threshold, t >= threshold) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fdr {
    pub value: f64,
    /// True when nothing was predicted positive (value reported as 0).
    pub no_positives: bool,
}

pub fn fdr_at_threshold(preds: &[f64], truths: &[f64], threshold: f64) -> Result<Fdr> {
    let c = ConfusionCounts::from_fractions(preds, truths, threshold)?;
    if c.tp + c.fp == 0 {
        return Ok(Fdr { value: 0.0, no_positives: true });
    }
    Ok(Fdr { value: c.fp as f64 / (c.tp + c.fp) as f64, no_positives: false })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bias {
    /// Mean of prediction minus truth, percentage points.
    pub mean: f64,
    pub std: f64,
}

/// Signed error in percentage points, positive meaning overestimation.
/// Inputs are percentages.
pub fn assessment_bias(preds: &[f64], truths: &[f64]) -> Result<Bias> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(StenosisError::invalid("bias needs equal nonempty lengths"));
    }
    let d: Vec<f64> = preds.iter().zip(truths).map(|(p, t)| p - t).collect();
    let s = summarize(&d);
    Ok(Bias { mean: s.mean, std: s.std.unwrap_or(0.0) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; absent for a single value.
    pub std: Option<f64>,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Summary { mean, std }
}

/// One evaluation run. Metrics a run did not compute are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub localization_accuracy: Option<f64>,
    pub dice: Option<f64>,
    pub auroc: Option<f64>,
    pub fdr: Option<f64>,
    pub assessment_bias: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub localization_accuracy: Option<Summary>,
    pub dice: Option<Summary>,
    pub auroc: Option<Summary>,
    pub fdr: Option<Summary>,
    pub assessment_bias: Option<Summary>,
}

pub fn aggregate_runs(runs: &[RunMetrics]) -> Result<AggregateReport> {
    if runs.is_empty() {
        return Err(StenosisError::invalid("no runs to aggregate"));
    }
    let field = |f: fn(&RunMetrics) -> Option<f64>| {
        let v: Vec<f64> = runs.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| summarize(&v))
    };
    Ok(AggregateReport {
        runs: runs.len(),
        localization_accuracy: field(|r| r.localization_accuracy),
        dice: field(|r| r.dice),
        auroc: field(|r| r.auroc),
        fdr: field(|r| r.fdr),
        assessment_bias: field(|r| r.assessment_bias),
    })
}

/// Literature figures printed beside measured results for comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFigures {
    pub source: String,
    pub fdr: f64,
    pub assessment_bias_pct: f64,
    pub assessment_bias_std_pct: f64,
}

impl ReferenceFigures {
    pub fn physician_visual_assessment() -> Self {
        ReferenceFigures {
            source: pva_reference::SOURCE.to_string(),
            fdr: pva_reference::FDR,
            assessment_bias_pct: pva_reference::BIAS_PCT,
            assessment_bias_std_pct: pva_reference::BIAS_STD_PCT,
        }
    }
}

/// Written by `eval`: every run, their mean ± std, and the reference
/// figures kept apart from anything measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub task: String,
    pub per_seed: Vec<RunMetrics>,
    pub aggregate: AggregateReport,
    pub physician_visual_assessment: ReferenceFigures,
}

impl EvaluationReport {
    pub fn new(task: impl Into<String>, per_seed: Vec<RunMetrics>) -> Result<Self> {
        let aggregate = aggregate_runs(&per_seed)?;
        Ok(EvaluationReport {
            task: task.into(),
            per_seed,
            aggregate,
            physician_visual_assessment: ReferenceFigures::physician_visual_assessment(),
        })
    }

    /// Human-readable summary, one metric per line.
    pub fn render(&self) -> String {
        let a = &self.aggregate;
        let fmt = |name: &str, s: &Option<Summary>| match s {
            Some(Summary { mean, std: Some(sd) }) => format!("{name}: {mean:.4} ± {sd:.4}\n"),
            Some(Summary { mean, std: None }) => format!("{name}: {mean:.4}\n"),
            None => String::new(),
        };
        let r = &self.physician_visual_assessment;
        let mut out = format!("{} over {} run(s)\n", self.task, a.runs);
        out += &fmt("localization accuracy", &a.localization_accuracy);
        out += &fmt("dice", &a.dice);
        out += &fmt("auroc", &a.auroc);
        out += &fmt("fdr", &a.fdr);
        out += &fmt("assessment bias (pp)", &a.assessment_bias);
        out += &format!(
            "physician visual assessment ({}, not measured): fdr {:.1}%, bias {:.1}% ± {:.1}%\n",
            r.source,
            100.0 * r.fdr,
            r.assessment_bias_pct,
            r.assessment_bias_std_pct
        );
        out
    }
}
