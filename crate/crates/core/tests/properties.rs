use gradcore::Tensor;
use proptest::prelude::*;

use stenosis::geometry::{pool_to_nonoverlap, region_label_grid, select_bbox, Activation, ConfidenceGrid};
use stenosis::losses::{mwce_weight_map, MwceParams};
use stenosis::metrics::{auroc, dice_coefficient, fdr_at_threshold, ConfusionCounts};
use stenosis::{GridSpec, PixelPoint};

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..60).prop_flat_map(|n| {
        (prop::collection::vec(0u8..20, n), prop::collection::vec(any::<bool>(), n)).prop_map(|(s, mut l)| {
            l[0] = true;
            l[1] = false;
            (s.into_iter().map(|v| v as f64 / 20.0).collect(), l)
        })
    })
}

fn mask(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::bool::weighted(0.3).prop_map(|b| if b { 1.0 } else { 0.0 }), len)
}

proptest! {
    #[test]
    fn auroc_ignores_monotone_rescaling((scores, labels) in scored_labels()) {
        let moved: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&moved, &labels).unwrap());
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auroc(&scores, &labels).unwrap() + auroc(&flipped, &labels).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dice_is_symmetric((a, b) in (1usize..80).prop_flat_map(|n| (mask(n), mask(n)))) {
        if a.iter().chain(&b).any(|&v| v > 0.0) {
            prop_assert_eq!(dice_coefficient(&a, &b).unwrap(), dice_coefficient(&b, &a).unwrap());
        }
    }

    #[test]
    fn fdr_complements_precision(preds in prop::collection::vec(0.0f64..1.0, 1..50), seed in 0u64..1000) {
        let truths: Vec<f64> = preds.iter().enumerate().map(|(i, p)| ((i as u64 * 31 + seed) % 97) as f64 / 96.0 * 0.5 + p * 0.5).collect();
        let c = ConfusionCounts::from_fractions(&preds, &truths, 0.7).unwrap();
        let fdr = fdr_at_threshold(&preds, &truths, 0.7).unwrap();
        prop_assert_eq!(c.total(), preds.len());
        if c.tp + c.fp > 0 {
            prop_assert!((fdr.value + c.tp as f64 / (c.tp + c.fp) as f64 - 1.0).abs() < 1e-12);
        } else {
            prop_assert!(fdr.no_positives);
        }
    }

    /// A perfect confidence grid decodes to a box holding the point, and
    /// shifting the point by one stride shifts the box with it away from
    /// the image border.
    #[test]
    fn perfect_grid_localizes(row in 0i64..256, col in 0i64..256) {
        let spec = GridSpec::desk();
        let decode = |p: PixelPoint| {
            let labels = region_label_grid(&spec, p).unwrap();
            let conf = ConfidenceGrid::new(labels.side, labels.values.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(), Activation::Probabilities).unwrap();
            select_bbox(&spec, &pool_to_nonoverlap(&spec, &conf).unwrap()).unwrap()
        };
        let p = PixelPoint::new(row, col);
        let b = decode(p);
        prop_assert!(b.contains(p));
        let inner = |v: i64| (64..176).contains(&v);
        if inner(row) && inner(col) {
            let moved = decode(PixelPoint::new(row + 16, col + 16));
            prop_assert_eq!((moved.row, moved.col), (b.row + 16, b.col + 16));
        }
    }

    #[test]
    fn mwce_weight_falls_off_with_distance(o in 0.0f64..1.0, r in 0i64..20, c in 0i64..20) {
        let z = Tensor::<f64>::zeros([20, 20]);
        let w = mwce_weight_map(&z, &z, PixelPoint::new(r, c), &Tensor::full([20, 20], o), &MwceParams::default()).unwrap().weight;
        let d2 = |i: usize, j: usize| (i as i64 - r).pow(2) + (j as i64 - c).pow(2);
        for i in 0..20 {
            for j in 0..19 {
                if d2(i, j) <= d2(i, j + 1) {
                    prop_assert!(w.at2(i, j) >= w.at2(i, j + 1));
                }
            }
        }
    }
}
