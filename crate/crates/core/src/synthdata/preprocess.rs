//! Contrast standardization and resizing.

use gradcore::Tensor;

/// Affine rescale to `[0, 1]`. A constant image maps to zeros and the flag
/// is set.
pub fn contrast_standardize(image: &Tensor<f32>) -> (Tensor<f32>, bool) {
    let (lo, hi) = image.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !(hi > lo) {
        return (Tensor::zeros(image.shape().to_vec()), true);
    }
    let span = hi - lo;
    (image.map(|v| ((v - lo) / span).clamp(0.0, 1.0)), false)
}

/// Bilinear resize of an `[H, W]` image to `[size, size]` with pixel-center
/// alignment and edge clamping.
pub fn resize_to(image: &Tensor<f32>, size: usize) -> Tensor<f32> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if (h, w) == (size, size) {
        return image.clone();
    }
    let (sy, sx) = (h as f64 / size as f64, w as f64 / size as f64);
    Tensor::from_fn([size, size], |i| {
        let y = ((i / size) as f64 + 0.5) * sy - 0.5;
        let x = ((i % size) as f64 + 0.5) * sx - 0.5;
        let y0 = y.floor().clamp(0.0, (h - 1) as f64);
        let x0 = x.floor().clamp(0.0, (w - 1) as f64);
        let (fy, fx) = ((y - y0).clamp(0.0, 1.0), (x - x0).clamp(0.0, 1.0));
        let (r0, c0) = (y0 as usize, x0 as usize);
        let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
        let v = |r, c| image.at2(r, c) as f64;
        let top = v(r0, c0) * (1.0 - fx) + v(r0, c1) * fx;
        let bot = v(r1, c0) * (1.0 - fx) + v(r1, c1) * fx;
        (top * (1.0 - fy) + bot * fy) as f32
    })
}

/// Nearest-neighbor resize, so binary masks stay binary.
pub fn resize_mask(mask: &Tensor<f32>, size: usize) -> Tensor<f32> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    Tensor::from_fn([size, size], |i| {
        let r = (((i / size) as f64 + 0.5) * h as f64 / size as f64) as usize;
        let c = (((i % size) as f64 + 0.5) * w as f64 / size as f64) as usize;
        mask.at2(r.min(h - 1), c.min(w - 1))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardize_examples() {
        let img = Tensor::from_fn([5, 10], |i| 10.0 + 250.0 * i as f32 / 49.0);
        let (out, flat) = contrast_standardize(&img);
        assert!(!flat);
        assert_eq!(out.data()[0], 0.0);
        assert_eq!(out.data()[49], 1.0);

        let unit = Tensor::from_fn([4, 4], |i| i as f32 / 15.0);
        assert_eq!(contrast_standardize(&unit).0, unit);

        let (z, flat) = contrast_standardize(&Tensor::full([3, 3], 7.0));
        assert!(flat);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_behaviour() {
        let mask = Tensor::from_fn([37, 37], |i| if (i * 7) % 5 == 0 { 1.0 } else { 0.0 });
        let r = resize_mask(&mask, 64);
        assert!(r.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let img = Tensor::full([30, 30], 0.25f32);
        assert!(resize_to(&img, 17).data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
        let ramp = Tensor::from_fn([8, 8], |i| (i % 8) as f32);
        assert_eq!(resize_to(&ramp, 8), ramp);
        let up = resize_to(&ramp, 16);
        assert!(up.data()[..16].windows(2).all(|w| w[1] >= w[0]));
    }
}
