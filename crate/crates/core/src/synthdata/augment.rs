//! Joint affine augmentation of image, masks and stenosis point.

use gradcore::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Result, StenosisError};
use crate::geometry::PixelPoint;

const MAX_TRIES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Elastic {
    pub alpha: f64,
    pub sigma: f64,
}

impl Default for Elastic {
    fn default() -> Self {
        Elastic { alpha: 70.0, sigma: 7.0 }
    }
}

/// Uniform ranges for rotation and shear (degrees, symmetric) and shift
/// (fraction of the image side per axis). Flips are never produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub rotation_deg: f64,
    pub shear_deg: f64,
    pub shift_frac: f64,
    /// Elastic deformation after the affine map; off unless set.
    pub elastic: Option<Elastic>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { rotation_deg: 7.0, shear_deg: 7.0, shift_frac: 0.04, elastic: None }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig { rotation_deg: 0.0, shear_deg: 0.0, shift_frac: 0.0, elastic: None }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.rotation_deg, self.shear_deg, self.shift_frac].iter().all(|v| v.is_finite() && *v >= 0.0)
            && self.shear_deg < 90.0
            && self.elastic.is_none_or(|e| e.alpha >= 0.0 && e.sigma > 0.0);
        if ok {
            Ok(())
        } else {
            Err(StenosisError::invalid(format!("invalid augmentation {self:?}")))
        }
    }

    fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.shear_deg == 0.0 && self.shift_frac == 0.0 && self.elastic.is_none()
    }
}

/// `p' = A·(p − c) + c + t` in `(row, col)` coordinates, `c` the image center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    pub matrix: [[f64; 2]; 2],
    pub shift: [f64; 2],
    pub center: [f64; 2],
}

impl AffineTransform {
    /// Rotation after column shear, then shift.
    pub fn new(rotation_deg: f64, shear_deg: f64, shift: [f64; 2], size: usize) -> Self {
        let (s, c) = rotation_deg.to_radians().sin_cos();
        let k = shear_deg.to_radians().tan();
        // rotation [[c, -s], [s, c]] times shear [[1, 0], [k, 1]] acting on (row, col)
        let matrix = [[c - s * k, -s], [s + c * k, c]];
        let mid = (size as f64 - 1.0) / 2.0;
        AffineTransform { matrix, shift, center: [mid, mid] }
    }

    pub fn sample(config: &AugmentConfig, size: usize, rng: &mut impl Rng) -> Self {
        let sym = |r: f64, rng: &mut dyn rand::RngCore| if r > 0.0 { Uniform::new_inclusive(-r, r).unwrap().sample(rng) } else { 0.0 };
        let rot = sym(config.rotation_deg, rng);
        let shear = sym(config.shear_deg, rng);
        let dy = sym(config.shift_frac, rng) * size as f64;
        let dx = sym(config.shift_frac, rng) * size as f64;
        AffineTransform::new(rot, shear, [dy, dx], size)
    }

    pub fn determinant(&self) -> f64 {
        let m = self.matrix;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = self.matrix;
        let (y, x) = (p[0] - self.center[0], p[1] - self.center[1]);
        [m[0][0] * y + m[0][1] * x + self.center[0] + self.shift[0], m[1][0] * y + m[1][1] * x + self.center[1] + self.shift[1]]
    }

    pub fn invert(&self, q: [f64; 2]) -> [f64; 2] {
        let m = self.matrix;
        let det = self.determinant();
        let (y, x) = (q[0] - self.center[0] - self.shift[0], q[1] - self.center[1] - self.shift[1]);
        [(m[1][1] * y - m[0][1] * x) / det + self.center[0], (-m[1][0] * y + m[0][0] * x) / det + self.center[1]]
    }
}

fn bilinear(img: &Tensor<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (r0, c0) = (y.floor() as usize, x.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    let (fy, fx) = (y - r0 as f64, x - c0 as f64);
    let v = |r, c| img.at2(r, c) as f64;
    ((v(r0, c0) * (1.0 - fx) + v(r0, c1) * fx) * (1.0 - fy) + (v(r1, c0) * (1.0 - fx) + v(r1, c1) * fx) * fy) as f32
}

fn nearest(mask: &Tensor<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = (mask.shape()[0] as i64, mask.shape()[1] as i64);
    let (r, c) = (y.round() as i64, x.round() as i64);
    if r < 0 || c < 0 || r >= h || c >= w {
        0.0
    } else {
        mask.at2(r as usize, c as usize)
    }
}

fn gaussian_blur(field: &mut [f64], size: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let mut tmp = vec![0.0; field.len()];
    for pass in 0..2 {
        for r in 0..size {
            for c in 0..size {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let o = k as i64 - radius;
                    let (rr, cc) = if pass == 0 { (r as i64, c as i64 + o) } else { (r as i64 + o, c as i64) };
                    let rr = rr.clamp(0, size as i64 - 1) as usize;
                    let cc = cc.clamp(0, size as i64 - 1) as usize;
                    acc += kv * field[rr * size + cc];
                }
                tmp[r * size + c] = acc / norm;
            }
        }
        field.copy_from_slice(&tmp);
    }
}

/// Random smooth displacement field `(dy, dx)` scaled by `alpha`.
fn elastic_field(e: &Elastic, size: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let mut draw = || {
        let mut f: Vec<f64> = (0..size * size).map(|_| rng.random_range(-1.0..1.0)).collect();
        gaussian_blur(&mut f, size, e.sigma);
        f.iter_mut().for_each(|v| *v *= e.alpha);
        f
    };
    let dy = draw();
    let dx = draw();
    (dy, dx)
}

/// Applies one random transform identically to image, masks and point.
/// If every attempt moves the point out of the image, the sample is
/// returned unchanged.
pub fn augment(sample: &Sample, config: &AugmentConfig, rng: &mut impl Rng) -> Result<Sample> {
    config.validate()?;
    if config.is_identity() {
        return Ok(sample.clone());
    }
    let size = sample.size();
    for _ in 0..MAX_TRIES {
        let t = AffineTransform::sample(config, size, rng);
        let field = config.elastic.map(|e| elastic_field(&e, size, rng));
        let p = t.apply([sample.point.row as f64, sample.point.col as f64]);
        let mut point = PixelPoint::new(p[0].round() as i64, p[1].round() as i64);
        if let Some((dy, dx)) = &field {
            // Output q samples input at t⁻¹(q + d(q)); find the output pixel
            // whose source lands closest to the original point.
            point = locate_elastic(&t, dy, dx, size, sample.point, point);
        }
        if !point.in_bounds(size) {
            continue;
        }
        let src = |i: usize| {
            let (r, c) = ((i / size) as f64, (i % size) as f64);
            let (r, c) = match &field {
                Some((dy, dx)) => (r + dy[i], c + dx[i]),
                None => (r, c),
            };
            t.invert([r, c])
        };
        let warp_img = |img: &Tensor<f32>| Tensor::from_fn([size, size], |i| {
            let s = src(i);
            bilinear(img, s[0], s[1])
        });
        let warp_mask = |m: &Tensor<f32>| Tensor::from_fn([size, size], |i| {
            let s = src(i);
            nearest(m, s[0], s[1])
        });
        let mut out = sample.clone();
        out.image = warp_img(&sample.image);
        out.lesion = warp_mask(&sample.lesion);
        out.silhouette = warp_mask(&sample.silhouette);
        out.point = point;
        out.centerline = sample
            .centerline
            .iter()
            .map(|&(y, x)| {
                let q = t.apply([y, x]);
                (q[0], q[1])
            })
            .collect();
        return Ok(out);
    }
    Ok(sample.clone())
}

fn locate_elastic(t: &AffineTransform, dy: &[f64], dx: &[f64], size: usize, orig: PixelPoint, guess: PixelPoint) -> PixelPoint {
    let mut best = (f64::INFINITY, guess);
    let reach = 12;
    for r in (guess.row - reach).max(0)..=(guess.row + reach).min(size as i64 - 1) {
        for c in (guess.col - reach).max(0)..=(guess.col + reach).min(size as i64 - 1) {
            let i = r as usize * size + c as usize;
            let s = t.invert([r as f64 + dy[i], c as f64 + dx[i]]);
            let d = (s[0] - orig.row as f64).powi(2) + (s[1] - orig.col as f64).powi(2);
            if d < best.0 {
                best = (d, PixelPoint::new(r, c));
            }
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridSpec;
    use crate::synthdata::{generate_sample, VesselParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = VesselParams::random(&GridSpec::desk(), (0.3, 0.8), &mut rng);
        generate_sample(&p, &GridSpec::desk(), seed).unwrap()
    }

    #[test]
    fn zero_ranges_are_identity() {
        let s = sample(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&s, &AugmentConfig::none(), &mut rng).unwrap(), s);
        let t = AffineTransform::new(0.0, 0.0, [0.0, 0.0], 256);
        assert_eq!(t.apply([3.0, 4.0]), [3.0, 4.0]);
    }

    #[test]
    fn transforms_preserve_orientation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let t = AffineTransform::sample(&AugmentConfig::default(), 256, &mut rng);
            assert!(t.determinant() > 0.9, "{t:?}");
            let p = [rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)];
            let q = t.invert(t.apply(p));
            assert!((q[0] - p[0]).abs() < 1e-9 && (q[1] - p[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn elastic_is_off_by_default() {
        assert!(AugmentConfig::default().elastic.is_none());
        let e = Elastic::default();
        assert_eq!((e.alpha, e.sigma), (70.0, 7.0));
    }

    #[test]
    fn elastic_keeps_point_on_lesion() {
        let s = sample(4);
        let cfg = AugmentConfig { elastic: Some(Elastic::default()), ..AugmentConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = augment(&s, &cfg, &mut rng).unwrap();
        let (r, c) = (a.point.row, a.point.col);
        let hit = (r - 2..=r + 2).any(|y| (c - 2..=c + 2).any(|x| a.lesion.at2(y as usize, x as usize) == 1.0));
        assert!(hit);
    }
}
