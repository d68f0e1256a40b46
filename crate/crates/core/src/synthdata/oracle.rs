//! Independent stenosis measurement from a binary mask and a centerline.

use gradcore::Tensor;

use crate::error::{Result, StenosisError};

const RAY_STEP: f64 = 0.05;
/// Half-window (in centerline samples) of the moving average applied to
/// the width profile before taking its minimum.
const SMOOTH: usize = 2;

fn on(mask: &Tensor<f32>, y: f64, x: f64) -> bool {
    let (h, w) = (mask.shape()[0] as i64, mask.shape()[1] as i64);
    let (r, c) = (y.round() as i64, x.round() as i64);
    r >= 0 && c >= 0 && r < h && c < w && mask.at2(r as usize, c as usize) > 0.5
}

/// Length of the run of mask pixels crossed by the line through `(y, x)`
/// along `(ny, nx)`, marched at sub-pixel steps.
fn chord(mask: &Tensor<f32>, y: f64, x: f64, ny: f64, nx: f64, limit: f64) -> f64 {
    if !on(mask, y, x) {
        return 0.0;
    }
    let run = |sign: f64| {
        let mut t = 0.0;
        while t < limit && on(mask, y + sign * (t + RAY_STEP) * ny, x + sign * (t + RAY_STEP) * nx) {
            t += RAY_STEP;
        }
        t + RAY_STEP / 2.0
    };
    run(1.0) + run(-1.0)
}

/// Walks the part of `centerline` covered by `mask`, measures the vessel
/// width as the perpendicular chord through the mask at every centerline
/// sample, and returns `100·(1 − min width / reference width)`.
///
/// The reference is the mean width over the outer bands of the covered
/// stretch (3–18 % in from each end); the minimum is taken over a smoothed
/// profile of the central stretch. A stretch interrupted by a zero-width
/// section is rejected.
pub fn measure_stenosis_oracle(mask: &Tensor<f32>, centerline: &[(f64, f64)]) -> Result<f64> {
    if mask.ndim() != 2 {
        return Err(StenosisError::invalid("oracle needs a 2-D mask"));
    }
    // Stretch of centerline from the first to the last sample in the mask.
    let first = centerline.iter().position(|&(y, x)| on(mask, y, x));
    let last = centerline.iter().rposition(|&(y, x)| on(mask, y, x));
    let best = match (first, last) {
        (Some(a), Some(b)) => a..b + 1,
        _ => 0..0,
    };
    let n = best.len();
    if n < 40 {
        return Err(StenosisError::invalid(format!("mask covers only {n} centerline samples")));
    }
    let pts = &centerline[best.clone()];
    let limit = mask.shape()[0].max(mask.shape()[1]) as f64;
    let widths: Vec<f64> = (0..n)
        .map(|i| {
            let (a, b) = (pts[i.saturating_sub(2)], pts[(i + 2).min(n - 1)]);
            let (ty, tx) = (b.0 - a.0, b.1 - a.1);
            let norm = (ty * ty + tx * tx).sqrt();
            chord(mask, pts[i].0, pts[i].1, -tx / norm, ty / norm, limit)
        })
        .collect();

    let band = |from: f64, to: f64| ((from * n as f64) as usize, (to * n as f64).ceil() as usize);
    let (a0, a1) = band(0.03, 0.18);
    let ends: Vec<f64> = widths[a0..a1].iter().chain(&widths[n - a1..n - a0]).copied().collect();
    let reference = ends.iter().sum::<f64>() / ends.len() as f64;

    let (c0, c1) = band(0.2, 0.8);
    if widths.iter().any(|&w| w <= 0.0) {
        return Err(StenosisError::invalid("mask has a zero-width section"));
    }
    let smoothed_min = (c0..c1)
        .map(|i| {
            let lo = i.saturating_sub(SMOOTH);
            let hi = (i + SMOOTH + 1).min(n);
            widths[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .fold(f64::INFINITY, f64::min);
    Ok(100.0 * (1.0 - smoothed_min / reference).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn band_with_notch(width: f64, notch: f64) -> (Tensor<f32>, Vec<(f64, f64)>) {
        // Horizontal band centered between rows 39 and 40; the notch narrows columns 50..70.
        let mask = Tensor::from_fn([80, 120], |i| {
            let (r, c) = ((i / 120) as f64, (i % 120) as f64);
            let half = if (50.0..70.0).contains(&c) { notch / 2.0 } else { width / 2.0 };
            if (r - 39.5).abs() < half { 1.0 } else { 0.0 }
        });
        let line = (0..240).map(|i| (39.5, i as f64 * 0.5)).collect();
        (mask, line)
    }

    #[test]
    fn constant_band_reads_zero() {
        let (mask, line) = band_with_notch(20.0, 20.0);
        assert!(measure_stenosis_oracle(&mask, &line).unwrap() < 0.5);
    }

    #[test]
    fn half_pinch_reads_fifty() {
        let (mask, line) = band_with_notch(20.0, 10.0);
        let pct = measure_stenosis_oracle(&mask, &line).unwrap();
        assert!((pct - 50.0).abs() <= 3.0, "{pct}");
    }

    #[test]
    fn zero_width_is_rejected() {
        let (mask, line) = band_with_notch(20.0, 0.0);
        assert!(measure_stenosis_oracle(&mask, &line).is_err());
    }
}
