//! Procedural angiogram phantoms with exact ground truth.
//!
//! A vessel is a smooth random curve entering from an image edge. Its radius
//! follows `r(s) = R·(1 − τ·(s − s₀)/S)·(1 − f·bump((s − s₀)/L))` with a
//! raised-cosine bump of half-extent `L` centered at arc length `s₀`, so the
//! stenosis is exactly `100·f` percent of the local healthy diameter. The
//! image is a Beer–Lambert projection of the contrast-filled tube over a
//! smooth noisy background. The lesion mask covers vessel pixels whose
//! nearest centerline arc length lies within `s₀ ± LESION_EXTENT·L`, i.e. the
//! narrowed segment plus healthy flanks.

mod augment;
mod io;
mod oracle;
mod preprocess;
mod split;

pub use augment::{augment, AffineTransform, AugmentConfig, Elastic};
pub use io::{load_dataset, write_dataset, ManifestRecord};
pub use oracle::measure_stenosis_oracle;
pub use preprocess::{contrast_standardize, resize_mask, resize_to};
pub use split::{stratified_split, stratum_of, Split, SplitAssignment, SplitSpec};

use gradcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StenosisError};
use crate::geometry::{GridSpec, PixelPoint};

/// Lesion mask half-extent along the centerline, in units of `L`.
pub const LESION_EXTENT: f64 = 1.6;
/// Centerline sampling step in pixels.
pub const CENTERLINE_STEP: f64 = 0.5;
const MAX_TRIES: usize = 10;

/// One synthetic case. Images and masks are `[S, S]`; masks hold 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub lesion: Tensor<f32>,
    pub silhouette: Tensor<f32>,
    pub point: PixelPoint,
    pub stenosis_pct: f64,
    pub seed: u64,
    /// Centerline as `(row, col)` points spaced [`CENTERLINE_STEP`] apart.
    /// Empty for samples loaded from disk.
    pub centerline: Vec<(f64, f64)>,
}

impl Sample {
    pub fn stenosis_fraction(&self) -> f64 {
        self.stenosis_pct / 100.0
    }

    pub fn size(&self) -> usize {
        self.image.shape()[0]
    }
}

/// Geometry and appearance of one vessel, in pixels of the target image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VesselParams {
    /// Knots of the smooth random curvature profile.
    pub control_points: usize,
    /// Largest curvature magnitude (1/px).
    pub max_curvature: f64,
    /// Healthy radius at the stenosis.
    pub ref_radius: f64,
    /// Relative radius change per image side of arc length.
    pub taper: f64,
    /// Nominal stenosis fraction `f`.
    pub stenosis_fraction: f64,
    /// Narrowing half-extent `L` along the centerline.
    pub narrowing_length: f64,
    /// Position of `s₀` as a fraction of the in-image arc.
    pub lesion_position: f64,
    /// Gaussian noise standard deviation before standardization.
    pub noise_amplitude: f64,
    /// Spatial scale of background blobs.
    pub background_scale: f64,
    /// Optical depth through the healthy vessel center.
    pub optical_depth: f64,
    /// Silhouette band width.
    pub silhouette_band: usize,
}

impl VesselParams {
    /// Draws parameters scaled to `spec.image_size` (reference scale 256).
    pub fn random(spec: &GridSpec, severity: (f64, f64), rng: &mut impl Rng) -> Self {
        let k = spec.image_size as f64 / 256.0;
        VesselParams {
            control_points: 5,
            max_curvature: 1.0 / (70.0 * k),
            ref_radius: rng.random_range(10.0..13.0) * k,
            taper: rng.random_range(0.0..0.15),
            stenosis_fraction: if severity.1 > severity.0 { rng.random_range(severity.0..severity.1) } else { severity.0 },
            narrowing_length: rng.random_range(12.0..18.0) * k,
            lesion_position: rng.random_range(0.3..0.7),
            noise_amplitude: rng.random_range(0.02..0.05),
            background_scale: rng.random_range(30.0..60.0) * k,
            optical_depth: rng.random_range(0.7..1.0),
            silhouette_band: if spec.image_size >= 512 { 8 } else { 4 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.control_points >= 2
            && self.max_curvature >= 0.0
            && self.ref_radius >= 2.0
            && (0.0..0.5).contains(&self.taper)
            && (0.0..1.0).contains(&self.stenosis_fraction)
            && self.narrowing_length > 0.0
            && (0.0..=1.0).contains(&self.lesion_position)
            && self.noise_amplitude >= 0.0
            && self.background_scale > 0.0
            && self.optical_depth > 0.0
            && self.silhouette_band >= 1;
        if ok {
            Ok(())
        } else {
            Err(StenosisError::invalid(format!("invalid vessel parameters {self:?}")))
        }
    }

    fn radius(&self, s: f64, s0: f64, size: f64) -> f64 {
        let u = (s - s0) / self.narrowing_length;
        let bump = if u.abs() < 1.0 { 0.5 * (1.0 + (std::f64::consts::PI * u).cos()) } else { 0.0 };
        self.ref_radius * (1.0 - self.taper * (s - s0) / size) * (1.0 - self.stenosis_fraction * bump)
    }
}

/// Dataset-level generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    pub grid: GridSpec,
    /// Range of nominal stenosis fractions, sampled uniformly.
    pub severity: (f64, f64),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { count: 856, seed: 0, grid: GridSpec::desk(), severity: (0.2, 0.9) }
    }
}

struct Curve {
    points: Vec<(f64, f64)>,
    /// Index range of points inside the image.
    inside: std::ops::Range<usize>,
}

fn smooth_knots(knots: &[f64], t: f64) -> f64 {
    // Catmull–Rom through the knots, t in [0, 1].
    let n = knots.len() - 1;
    let x = t.clamp(0.0, 1.0) * n as f64;
    let i = (x.floor() as usize).min(n - 1);
    let u = x - i as f64;
    let p = |j: isize| knots[j.clamp(0, n as isize) as usize];
    let (p0, p1, p2, p3) = (p(i as isize - 1), p(i as isize), p(i as isize + 1), p(i as isize + 2));
    0.5 * (2.0 * p1 + (p2 - p0) * u + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u * u + (3.0 * p1 - p0 - 3.0 * p2 + p3) * u * u * u)
}

fn trace_curve(params: &VesselParams, size: f64, rng: &mut ChaCha8Rng) -> Option<Curve> {
    let margin = 6.0;
    let edge = rng.random_range(0..4);
    let along = rng.random_range(0.2..0.8) * size;
    let tilt = rng.random_range(-0.45..0.45);
    let (mut y, mut x, mut heading) = match edge {
        0 => (-margin, along, std::f64::consts::FRAC_PI_2),
        1 => (size + margin, along, -std::f64::consts::FRAC_PI_2),
        2 => (along, -margin, 0.0),
        _ => (along, size + margin, std::f64::consts::PI),
    };
    heading += tilt;
    let knots: Vec<f64> = (0..params.control_points).map(|_| rng.random_range(-1.0..1.0)).collect();
    let max_len = 2.5 * size;
    let steps = (max_len / CENTERLINE_STEP) as usize;
    let mut points = Vec::with_capacity(steps);
    for i in 0..steps {
        points.push((y, x));
        let kappa = params.max_curvature * smooth_knots(&knots, i as f64 / steps as f64 * 2.0);
        heading += kappa * CENTERLINE_STEP;
        // heading is measured from the +col axis towards +row
        x += CENTERLINE_STEP * heading.cos();
        y += CENTERLINE_STEP * heading.sin();
        let outside = y < -margin - 1.0 || x < -margin - 1.0 || y > size + margin + 1.0 || x > size + margin + 1.0;
        if outside && i > 10 {
            points.push((y, x));
            break;
        }
    }
    let inb = |&(y, x): &(f64, f64)| y >= 0.0 && x >= 0.0 && y <= size - 1.0 && x <= size - 1.0;
    let first = points.iter().position(inb)?;
    let len = points[first..].iter().position(|p| !inb(p)).unwrap_or(points.len() - first);
    Some(Curve { points, inside: first..first + len })
}

fn self_intersects(curve: &Curve, clearance: f64, min_separation: usize) -> bool {
    let pts = &curve.points[curve.inside.clone()];
    let c2 = clearance * clearance;
    // Coarse stride keeps the quadratic scan cheap; clearance absorbs it.
    let stride = 4;
    for i in (0..pts.len()).step_by(stride) {
        for j in (i + min_separation..pts.len()).step_by(stride) {
            let (dy, dx) = (pts[i].0 - pts[j].0, pts[i].1 - pts[j].1);
            if dy * dy + dx * dx < c2 {
                return true;
            }
        }
    }
    false
}

/// Renders one sample. Deterministic in `(params, spec, seed)`.
pub fn generate_sample(params: &VesselParams, spec: &GridSpec, seed: u64) -> Result<Sample> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_TRIES {
        if let Some(sample) = try_generate(params, spec, seed, &mut rng) {
            return Ok(sample);
        }
    }
    Err(StenosisError::Degenerate(format!("no valid vessel after {MAX_TRIES} tries (seed {seed})")))
}

fn try_generate(params: &VesselParams, spec: &GridSpec, seed: u64, rng: &mut ChaCha8Rng) -> Option<Sample> {
    let size = spec.image_size;
    let sz = size as f64;
    let curve = trace_curve(params, sz, rng)?;
    let inside_len = curve.inside.len() as f64 * CENTERLINE_STEP;
    if inside_len < 0.6 * sz {
        return None;
    }
    let r_max = params.ref_radius * (1.0 + params.taper * 2.5);
    let band = params.silhouette_band as f64;
    if self_intersects(&curve, 2.0 * r_max + 2.0 * band + 4.0, (4.0 * (r_max + band) / CENTERLINE_STEP) as usize) {
        return None;
    }
    let i0 = curve.inside.start + (params.lesion_position * (curve.inside.len() - 1) as f64).round() as usize;
    let s0 = i0 as f64 * CENTERLINE_STEP;
    let half = LESION_EXTENT * params.narrowing_length;
    // Lesion plus its silhouette must stay clear of the border.
    let border = params.ref_radius + band + 3.0;
    let lo = ((s0 - half - params.ref_radius) / CENTERLINE_STEP).floor().max(0.0) as usize;
    let hi = (((s0 + half + params.ref_radius) / CENTERLINE_STEP).ceil() as usize).min(curve.points.len() - 1);
    if curve.points[lo..=hi].iter().any(|&(y, x)| y < border || x < border || y > sz - 1.0 - border || x > sz - 1.0 - border)
    {
        return None;
    }

    // Nearest centerline distance and arc length per pixel, stamped locally.
    let mut dist = vec![f64::INFINITY; size * size];
    let mut arc = vec![0.0f64; size * size];
    let reach = (r_max + 3.0).ceil() as i64;
    for (i, &(py, px)) in curve.points.iter().enumerate() {
        let (cy, cx) = (py.round() as i64, px.round() as i64);
        for r in (cy - reach).max(0)..=(cy + reach).min(size as i64 - 1) {
            for c in (cx - reach).max(0)..=(cx + reach).min(size as i64 - 1) {
                let d = ((r as f64 - py).powi(2) + (c as f64 - px).powi(2)).sqrt();
                let idx = r as usize * size + c as usize;
                if d < dist[idx] {
                    dist[idx] = d;
                    arc[idx] = i as f64 * CENTERLINE_STEP;
                }
            }
        }
    }

    let mut lesion = vec![0.0f32; size * size];
    let mut depth = vec![0.0f64; size * size];
    let mu = params.optical_depth / (2.0 * params.ref_radius);
    for idx in 0..size * size {
        if !dist[idx].is_finite() {
            continue;
        }
        let r = params.radius(arc[idx], s0, sz);
        if dist[idx] < r {
            depth[idx] = mu * 2.0 * (r * r - dist[idx] * dist[idx]).sqrt();
            if (arc[idx] - s0).abs() <= half {
                lesion[idx] = 1.0;
            }
        }
    }

    let (py, px) = curve.points[i0];
    let point = PixelPoint::new(py.round() as i64, px.round() as i64);
    if lesion[point.row as usize * size + point.col as usize] != 1.0 {
        return None;
    }

    let blobs: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| (rng.random_range(0.0..sz), rng.random_range(0.0..sz), rng.random_range(-0.15..0.15)))
        .collect();
    let noise = Normal::new(0.0, params.noise_amplitude.max(1e-12)).unwrap();
    let two_s2 = 2.0 * params.background_scale * params.background_scale;
    let raw = Tensor::from_fn([size, size], |idx| {
        let (r, c) = ((idx / size) as f64, (idx % size) as f64);
        let bg = 0.75 + blobs.iter().map(|&(by, bx, a)| a * (-((r - by).powi(2) + (c - bx).powi(2)) / two_s2).exp()).sum::<f64>();
        let n = if params.noise_amplitude > 0.0 { noise.sample(rng) } else { 0.0 };
        (bg * (-depth[idx]).exp() + n) as f32
    });
    let (image, _) = contrast_standardize(&raw);
    let lesion = Tensor::new([size, size], lesion).ok()?;
    let silhouette = derive_silhouette(&lesion, params.silhouette_band).ok()?;
    let in_image = curve.points[curve.inside.clone()].to_vec();
    Some(Sample {
        id: format!("s{seed:08}"),
        image,
        lesion,
        silhouette,
        point,
        stenosis_pct: 100.0 * params.stenosis_fraction,
        seed,
        centerline: in_image,
    })
}

/// Non-lesion pixels within `band_px` (Euclidean) of a lesion pixel.
pub fn derive_silhouette(lesion: &Tensor<f32>, band_px: usize) -> Result<Tensor<f32>> {
    let (h, w) = (lesion.shape()[0], lesion.shape()[1]);
    if lesion.ndim() != 2 {
        return Err(StenosisError::invalid("silhouette needs a 2-D mask"));
    }
    if !lesion.data().iter().any(|&v| v > 0.5) {
        return Err(StenosisError::invalid("empty lesion mask"));
    }
    let b = band_px as i64;
    let mut out = Tensor::<f32>::zeros([h, w]);
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            if lesion.at2(r as usize, c as usize) < 0.5 {
                continue;
            }
            // Interior pixels cannot reach the band.
            let interior = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().all(|(dr, dc)| {
                let (rr, cc) = (r + dr, c + dc);
                rr >= 0 && cc >= 0 && rr < h as i64 && cc < w as i64 && lesion.at2(rr as usize, cc as usize) > 0.5
            });
            if interior {
                continue;
            }
            for rr in (r - b).max(0)..=(r + b).min(h as i64 - 1) {
                for cc in (c - b).max(0)..=(c + b).min(w as i64 - 1) {
                    if (rr - r).pow(2) + (cc - c).pow(2) <= b * b && lesion.at2(rr as usize, cc as usize) < 0.5 {
                        out.set2(rr as usize, cc as usize, 1.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Generates `config.count` samples; sample `i` uses seed `config.seed + i`.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Vec<Sample>> {
    (0..config.count as u64).map(|i| generate_indexed(config, config.seed + i)).collect()
}

/// The sample a dataset with this configuration holds at seed `seed`.
pub fn generate_indexed(config: &DatasetConfig, seed: u64) -> Result<Sample> {
    let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7e55e1);
    let params = VesselParams::random(&config.grid, config.severity, &mut prng);
    generate_sample(&params, &config.grid, seed)
}
