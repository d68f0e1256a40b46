//! Training items for each task, built on the fly from samples.

use gradcore::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, StenosisError};
use crate::geometry::{crop_box, point_in_crop, region_label_grid, BBox, GridSpec, PixelPoint};
use crate::synthdata::{augment, AugmentConfig};
use crate::synthdata::Sample;
use crate::train::{ItemSource, Target, TrainItem};

/// A T-aligned `B×B` box holding `point`: uniformly drawn among all such
/// boxes when `rng` is given, otherwise centered on the point.
pub fn crop_for(spec: &GridSpec, point: PixelPoint, rng: Option<&mut ChaCha8Rng>) -> Result<BBox> {
    point.check_bounds(spec.image_size)?;
    let Some(rng) = rng else { return Ok(BBox::centered_on(spec, point)) };
    let t = spec.stride as i64;
    let b = spec.box_size as i64;
    let max = (spec.image_size - spec.box_size) as i64;
    let mut pick = |p: i64| {
        let lo = ((p - b + 1).max(0) + t - 1) / t;
        let hi = p.min(max) / t;
        rng.random_range(lo..=hi) * t
    };
    let row = pick(point.row);
    let col = pick(point.col);
    Ok(BBox { row: row as usize, col: col as usize, size: spec.box_size })
}

fn prepare(sample: &Sample, config: &AugmentConfig, rng: Option<&mut ChaCha8Rng>) -> Result<Sample> {
    match rng {
        Some(rng) => augment(sample, config, rng),
        None => Ok(sample.clone()),
    }
}

fn with_channel(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Ok(t.clone().reshape(shape)?)
}

/// Stacks a cropped image and a mask channel into `[2, B, B]`.
pub fn two_channel(crop: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    if crop.len() != mask.len() {
        return Err(StenosisError::invalid("crop and mask differ in size"));
    }
    let side = crop.shape()[crop.ndim() - 1];
    let mut data = Vec::with_capacity(2 * crop.len());
    data.extend_from_slice(crop.data());
    data.extend_from_slice(mask.data());
    Ok(Tensor::new([2, side, crop.len() / side], data)?)
}

/// Whole images against window labels.
pub struct LocalizerItems<'a> {
    pub samples: &'a [Sample],
    pub grid: GridSpec,
    pub augment: AugmentConfig,
}

impl ItemSource for LocalizerItems<'_> {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn item(&self, index: usize, rng: Option<&mut ChaCha8Rng>) -> Result<TrainItem> {
        let s = prepare(&self.samples[index], &self.augment, rng)?;
        let k = self.grid.k();
        let labels = region_label_grid(&self.grid, s.point)?.to_tensor::<f32>().reshape([1, k, k])?;
        Ok(TrainItem { input: with_channel(&s.image)?, target: Target::Grid(labels) })
    }
}

/// `B×B` crops holding the stenosis against lesion masks.
pub struct SegmenterItems<'a> {
    pub samples: &'a [Sample],
    pub grid: GridSpec,
    pub augment: AugmentConfig,
}

impl ItemSource for SegmenterItems<'_> {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn item(&self, index: usize, mut rng: Option<&mut ChaCha8Rng>) -> Result<TrainItem> {
        let s = prepare(&self.samples[index], &self.augment, rng.as_deref_mut())?;
        let bbox = crop_for(&self.grid, s.point, rng)?;
        let center = point_in_crop(s.point, &bbox).ok_or_else(|| StenosisError::invalid("crop misses the stenosis"))?;
        Ok(TrainItem {
            input: with_channel(&crop_box(&s.image, &bbox)?)?,
            target: Target::Mask {
                lesion: with_channel(&crop_box(&s.lesion, &bbox)?)?,
                silhouette: with_channel(&crop_box(&s.silhouette, &bbox)?)?,
                center,
            },
        })
    }
}

/// Crops stacked with their ground-truth lesion mask against the stenosis
/// fraction.
pub struct ClassifierItems<'a> {
    pub samples: &'a [Sample],
    pub grid: GridSpec,
    pub augment: AugmentConfig,
}

impl ItemSource for ClassifierItems<'_> {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn item(&self, index: usize, mut rng: Option<&mut ChaCha8Rng>) -> Result<TrainItem> {
        let s = prepare(&self.samples[index], &self.augment, rng.as_deref_mut())?;
        let bbox = crop_for(&self.grid, s.point, rng)?;
        let input = two_channel(&crop_box(&s.image, &bbox)?, &crop_box(&s.lesion, &bbox)?)?;
        Ok(TrainItem { input, target: Target::Fraction(s.stenosis_fraction()) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn random_crops_hold_the_point_and_stay_aligned() {
        let spec = GridSpec::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let p = PixelPoint::new(rng.random_range(0..256), rng.random_range(0..256));
            let b = crop_for(&spec, p, Some(&mut rng)).unwrap();
            assert!(b.contains(p) && b.fits(256), "{b:?} {p:?}");
            assert_eq!((b.row % 16, b.col % 16), (0, 0));
        }
    }

    #[test]
    fn random_crops_cover_every_alignment() {
        let spec = GridSpec::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = PixelPoint::new(128, 128);
        let mut rows = std::collections::BTreeSet::new();
        for _ in 0..500 {
            rows.insert(crop_for(&spec, p, Some(&mut rng)).unwrap().row);
        }
        // Aligned starts in [33, 128]: 48, 64, 80, 96, 112, 128.
        assert_eq!(rows.into_iter().collect::<Vec<_>>(), vec![48, 64, 80, 96, 112, 128]);
    }

    #[test]
    fn two_channel_layout() {
        let a = Tensor::from_fn([2, 2], |i| i as f32);
        let m = Tensor::full([2, 2], 9.0f32);
        let t = two_channel(&a, &m).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 2.0, 3.0, 9.0, 9.0, 9.0, 9.0]);
    }
}
