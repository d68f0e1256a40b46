//! Localization geometry: window labels, grid pooling and box selection.
//!
//! All intervals are half-open and 0-indexed. A window `(a, b)` covers pixel
//! rows `[a·T, a·T + W)` and columns `[b·T, b·T + W)`; a pooled cell `(i, j)`
//! covers `[i·T, (i+1)·T)` in each axis.

use gradcore::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StenosisError};

/// Square localization layout: image side `S`, window `W`, stride `T` and
/// output box side `B`, all in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub image_size: usize,
    pub window: usize,
    pub stride: usize,
    pub box_size: usize,
}

impl GridSpec {
    pub fn new(image_size: usize, window: usize, stride: usize, box_size: usize) -> Result<Self> {
        let spec = GridSpec { image_size, window, stride, box_size };
        spec.validate()?;
        Ok(spec)
    }

    /// 512-pixel images, 64-pixel windows at stride 32, 192-pixel boxes.
    pub fn paper() -> Self {
        GridSpec { image_size: 512, window: 64, stride: 32, box_size: 192 }
    }

    /// Half-scale layout with the same grid sides (k = 15, n = 16, c = 6).
    pub fn desk() -> Self {
        GridSpec { image_size: 256, window: 32, stride: 16, box_size: 96 }
    }

    pub fn with_box_size(self, box_size: usize) -> Result<Self> {
        GridSpec::new(self.image_size, self.window, self.stride, box_size)
    }

    pub fn validate(&self) -> Result<()> {
        let GridSpec { image_size: s, window: w, stride: t, box_size: b } = *self;
        let bad = |m: String| Err(StenosisError::invalid(format!("grid spec {s}/{w}/{t}/{b}: {m}")));
        if t == 0 || s == 0 || b == 0 {
            return bad("sizes must be positive".into());
        }
        if s % t != 0 || w % t != 0 || b % t != 0 {
            return bad("image, window and box sizes must be multiples of the stride".into());
        }
        if w != 2 * t {
            return bad("window must be twice the stride".into());
        }
        if w > s || b > s {
            return bad("window and box must fit inside the image".into());
        }
        Ok(())
    }

    /// Confidence grid side `k = (S − W)/T + 1`.
    pub fn k(&self) -> usize {
        (self.image_size - self.window) / self.stride + 1
    }

    /// Pooled grid side `n = S/T`.
    pub fn n(&self) -> usize {
        self.image_size / self.stride
    }

    /// Box side in pooled cells, `c = B/T`.
    pub fn c(&self) -> usize {
        self.box_size / self.stride
    }

    /// Positive-class weight `k²`.
    pub fn positive_weight(&self) -> f64 {
        (self.k() * self.k()) as f64
    }
}

/// Pixel location, row `c0` and column `c1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelPoint {
    pub row: i64,
    pub col: i64,
}

impl PixelPoint {
    pub fn new(row: i64, col: i64) -> Self {
        PixelPoint { row, col }
    }

    pub fn in_bounds(&self, size: usize) -> bool {
        (0..size as i64).contains(&self.row) && (0..size as i64).contains(&self.col)
    }

    pub fn check_bounds(&self, size: usize) -> Result<()> {
        if self.in_bounds(size) {
            Ok(())
        } else {
            Err(StenosisError::OutOfBounds { row: self.row, col: self.col, size })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Logits,
    Probabilities,
}

/// `k×k` window scores, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceGrid {
    pub side: usize,
    pub values: Vec<f64>,
    pub activation: Activation,
}

impl ConfidenceGrid {
    pub fn new(side: usize, values: Vec<f64>, activation: Activation) -> Result<Self> {
        if values.len() != side * side {
            return Err(StenosisError::invalid(format!("{side}x{side} grid needs {} values", side * side)));
        }
        if activation == Activation::Probabilities && values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(StenosisError::invalid("probabilities must lie in [0, 1]"));
        }
        Ok(ConfidenceGrid { side, values, activation })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.side + j]
    }

    pub fn to_probabilities(&self) -> ConfidenceGrid {
        match self.activation {
            Activation::Probabilities => self.clone(),
            Activation::Logits => ConfidenceGrid {
                side: self.side,
                values: self.values.iter().map(|&v| gradcore::ops::sigmoid(v)).collect(),
                activation: Activation::Probabilities,
            },
        }
    }
}

/// `k×k` binary window labels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    pub side: usize,
    pub values: Vec<bool>,
}

impl LabelGrid {
    pub fn at(&self, i: usize, j: usize) -> bool {
        self.values[i * self.side + j]
    }

    pub fn positives(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn([self.side, self.side], |i| if self.values[i] { T::one() } else { T::zero() })
    }
}

/// `n×n` non-overlapping cell scores, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledGrid {
    pub side: usize,
    pub values: Vec<f64>,
}

impl PooledGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.side + j]
    }
}

/// Square pixel box `[row, row + size) × [col, col + size)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl BBox {
    pub fn contains(&self, p: PixelPoint) -> bool {
        let (r, c) = (self.row as i64, self.col as i64);
        let s = self.size as i64;
        p.row >= r && p.row < r + s && p.col >= c && p.col < c + s
    }

    pub fn fits(&self, image_size: usize) -> bool {
        self.row + self.size <= image_size && self.col + self.size <= image_size
    }

    /// Stride-aligned box of side `B` centered on `point` as closely as the
    /// grid allows, clamped inside the image.
    pub fn centered_on(spec: &GridSpec, point: PixelPoint) -> BBox {
        let t = spec.stride as f64;
        let max = (spec.image_size - spec.box_size) as f64;
        let place = |v: i64| {
            let ideal = v as f64 + 0.5 - spec.box_size as f64 / 2.0;
            ((ideal / t).round() * t).clamp(0.0, max) as usize
        };
        BBox { row: place(point.row), col: place(point.col), size: spec.box_size }
    }
}

/// `y_ab = 1` iff window `(a, b)` contains the point.
pub fn region_label_grid(spec: &GridSpec, point: PixelPoint) -> Result<LabelGrid> {
    point.check_bounds(spec.image_size)?;
    let (k, t, w) = (spec.k(), spec.stride as i64, spec.window as i64);
    let covers = |a: usize, v: i64| {
        let start = a as i64 * t;
        v >= start && v < start + w
    };
    let values = (0..k * k).map(|idx| covers(idx / k, point.row) && covers(idx % k, point.col)).collect();
    Ok(LabelGrid { side: k, values })
}

/// `p_ij = max(o_ij, o_i(j−1), o_(i−1)j, o_(i−1)(j−1))` over existing windows.
pub fn pool_to_nonoverlap(spec: &GridSpec, conf: &ConfidenceGrid) -> Result<PooledGrid> {
    let (k, n) = (spec.k(), spec.n());
    if conf.side != k {
        return Err(StenosisError::invalid(format!("confidence grid is {0}x{0}, expected {k}x{k}", conf.side)));
    }
    let mut values = vec![f64::NEG_INFINITY; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut best = f64::NEG_INFINITY;
            for a in i.saturating_sub(1)..=i.min(k - 1) {
                for b in j.saturating_sub(1)..=j.min(k - 1) {
                    best = best.max(conf.at(a, b));
                }
            }
            values[i * n + j] = best;
        }
    }
    Ok(PooledGrid { side: n, values })
}

/// Box whose `c×c` block of pooled cells has the largest sum; ties go to
/// the lexicographically smallest `(i, j)`.
pub fn select_bbox(spec: &GridSpec, pooled: &PooledGrid) -> Result<BBox> {
    let (n, c) = (spec.n(), spec.c());
    if pooled.side != n {
        return Err(StenosisError::invalid(format!("pooled grid is {0}x{0}, expected {n}x{n}", pooled.side)));
    }
    if c > n {
        return Err(StenosisError::invalid("box larger than grid"));
    }
    // Summed-area table with a zero border.
    let mut sat = vec![0.0; (n + 1) * (n + 1)];
    for i in 0..n {
        for j in 0..n {
            sat[(i + 1) * (n + 1) + j + 1] =
                pooled.at(i, j) + sat[i * (n + 1) + j + 1] + sat[(i + 1) * (n + 1) + j] - sat[i * (n + 1) + j];
        }
    }
    let block = |i: usize, j: usize| {
        sat[(i + c) * (n + 1) + j + c] - sat[i * (n + 1) + j + c] - sat[(i + c) * (n + 1) + j] + sat[i * (n + 1) + j]
    };
    let mut best = (0, 0);
    let mut best_sum = block(0, 0);
    for i in 0..=n - c {
        for j in 0..=n - c {
            let s = block(i, j);
            if s > best_sum {
                best_sum = s;
                best = (i, j);
            }
        }
    }
    Ok(BBox { row: best.0 * spec.stride, col: best.1 * spec.stride, size: spec.box_size })
}

/// `B×B` crop of the last two axes.
pub fn crop_box<T: Scalar>(image: &Tensor<T>, bbox: &BBox) -> Result<Tensor<T>> {
    let nd = image.ndim();
    if nd < 2 {
        return Err(StenosisError::invalid("crop needs at least two axes"));
    }
    let (h, w) = (image.shape()[nd - 2], image.shape()[nd - 1]);
    if bbox.row + bbox.size > h || bbox.col + bbox.size > w {
        return Err(StenosisError::invalid(format!(
            "box at ({}, {}) of side {} outside {h}x{w} image",
            bbox.row, bbox.col, bbox.size
        )));
    }
    let planes = image.len() / (h * w);
    let s = bbox.size;
    let mut data = Vec::with_capacity(planes * s * s);
    for p in 0..planes {
        let plane = &image.data()[p * h * w..(p + 1) * h * w];
        for r in bbox.row..bbox.row + s {
            data.extend_from_slice(&plane[r * w + bbox.col..r * w + bbox.col + s]);
        }
    }
    let mut shape = image.shape().to_vec();
    shape[nd - 2] = s;
    shape[nd - 1] = s;
    Ok(Tensor::new(shape, data)?)
}

/// Writes `crop` back into `image` at `bbox` (inverse of [`crop_box`]).
pub fn paste_box<T: Scalar>(image: &mut Tensor<T>, crop: &Tensor<T>, bbox: &BBox) -> Result<()> {
    let nd = image.ndim();
    let (h, w) = (image.shape()[nd - 2], image.shape()[nd - 1]);
    let s = bbox.size;
    if !bbox.fits(h.min(w)) || crop.len() * h * w != image.len() * s * s {
        return Err(StenosisError::invalid("crop does not fit the image"));
    }
    let planes = image.len() / (h * w);
    for p in 0..planes {
        for r in 0..s {
            let dst = p * h * w + (bbox.row + r) * w + bbox.col;
            let src = p * s * s + r * s;
            image.data_mut()[dst..dst + s].copy_from_slice(&crop.data()[src..src + s]);
        }
    }
    Ok(())
}

/// Maps an image point into crop coordinates; `None` when the box does not
/// contain it.
pub fn point_in_crop(point: PixelPoint, bbox: &BBox) -> Option<PixelPoint> {
    bbox.contains(point).then(|| PixelPoint::new(point.row - bbox.row as i64, point.col - bbox.col as i64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_and_desk_sides() {
        for spec in [GridSpec::paper(), GridSpec::desk()] {
            assert_eq!((spec.k(), spec.n(), spec.c()), (15, 16, 6));
            assert_eq!(spec.positive_weight(), 225.0);
        }
        assert_eq!(GridSpec::desk().with_box_size(64).unwrap().c(), 4);
        assert!(GridSpec::new(256, 48, 16, 96).is_err());
        assert!(GridSpec::new(256, 32, 16, 100).is_err());
    }

    #[test]
    fn corner_and_boundary_labels() {
        let spec = GridSpec::paper();
        let g = region_label_grid(&spec, PixelPoint::new(0, 0)).unwrap();
        assert_eq!(g.positives(), 1);
        assert!(g.at(0, 0));

        let g = region_label_grid(&spec, PixelPoint::new(32, 32)).unwrap();
        assert_eq!(g.positives(), 4);
        for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert!(g.at(a, b));
        }

        let g = region_label_grid(&spec, PixelPoint::new(511, 511)).unwrap();
        assert_eq!(g.positives(), 1);
        assert!(g.at(14, 14));

        assert!(region_label_grid(&spec, PixelPoint::new(512, 0)).is_err());
        assert!(region_label_grid(&spec, PixelPoint::new(-1, 3)).is_err());
    }

    #[test]
    fn single_window_spreads_to_four_cells() {
        let spec = GridSpec::paper();
        let mut v = vec![0.0; 225];
        v[0] = 1.0;
        let pooled = pool_to_nonoverlap(&spec, &ConfidenceGrid::new(15, v, Activation::Probabilities).unwrap()).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(pooled.at(i, j), if i < 2 && j < 2 { 1.0 } else { 0.0 });
            }
        }
        let flat = ConfidenceGrid::new(15, vec![0.3; 225], Activation::Probabilities).unwrap();
        assert!(pool_to_nonoverlap(&spec, &flat).unwrap().values.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn bbox_tie_breaks() {
        let spec = GridSpec::paper();
        let zero = PooledGrid { side: 16, values: vec![0.0; 256] };
        assert_eq!(select_bbox(&spec, &zero).unwrap(), BBox { row: 0, col: 0, size: 192 });
        let mut hot = zero.clone();
        hot.values[8 * 16 + 8] = 1.0;
        assert_eq!(select_bbox(&spec, &hot).unwrap(), BBox { row: 96, col: 96, size: 192 });
    }

    #[test]
    fn crop_paste_and_point_mapping() {
        let img = Tensor::<f32>::from_fn([8, 8], |i| i as f32);
        let b = BBox { row: 2, col: 4, size: 4 };
        let crop = crop_box(&img, &b).unwrap();
        assert_eq!(crop.at2(0, 0), img.at2(2, 4));
        let mut blank = Tensor::<f32>::zeros([8, 8]);
        paste_box(&mut blank, &crop, &b).unwrap();
        assert_eq!(crop_box(&blank, &b).unwrap(), crop);
        assert_eq!(point_in_crop(PixelPoint::new(3, 7), &b), Some(PixelPoint::new(1, 3)));
        assert_eq!(point_in_crop(PixelPoint::new(6, 7), &b), None);
        assert!(crop_box(&img, &BBox { row: 6, col: 0, size: 4 }).is_err());
    }

    #[test]
    fn centered_box_is_aligned_and_clamped() {
        let spec = GridSpec::desk();
        let b = BBox::centered_on(&spec, PixelPoint::new(128, 128));
        assert_eq!((b.row, b.col), (80, 80));
        let b = BBox::centered_on(&spec, PixelPoint::new(2, 255));
        assert_eq!((b.row, b.col), (0, 160));
        assert!(b.fits(256));
    }
}
