//! The full finite-difference suite: every engine op, every loss and the
//! three networks at mini scale, all in 64-bit.

use gradcore::gradcheck::{check_scalar_fn, grad_check_graph, standard_cases};
use gradcore::{grad_check, GradCheckOptions, GradCheckReport, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::geometry::PixelPoint;
use crate::losses::{dice_loss_logits, mse_loss, mwce_loss, mwce_weight_map, softplus, weighted_grid_bce, MwceParams};
use crate::models::{build, Profile, Task};

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample::<f64, _>(StandardNormal))
}

fn binary(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| if rng.random_bool(p) { 1.0 } else { 0.0 })
}

/// Random logits scaled to a moderate range.
fn logits(side: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    normal(&[side, side], rng).map(|v| 1.5 * v)
}

/// Checks each loss on `instances` random draws.
pub fn loss_checks(instances: usize, opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for seed in 0..instances as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ seed);
        let k = rng.random_range(2..6);
        let x = logits(k, &mut rng);
        let y = binary(&[k, k], 0.3, &mut rng);
        let w = (k * k) as f64;
        out.push(check_scalar_fn("grid_bce", &x, opts, |o| Ok(weighted_grid_bce(o, &y, w)?))?);

        let side = rng.random_range(3..9);
        let x = logits(side, &mut rng);
        let y = binary(&[side, side], 0.4, &mut rng);
        out.push(check_scalar_fn("dice", &x, opts, |o| Ok(dice_loss_logits(o, &y, 1e-6)?))?);

        let lesion = binary(&[side, side], 0.3, &mut rng);
        let sil = Tensor::from_fn([side, side], |i| {
            if lesion.data()[i] == 0.0 && rng.random_bool(0.4) {
                1.0
            } else {
                0.0
            }
        });
        let c = PixelPoint::new(rng.random_range(0..side as i64), rng.random_range(0..side as i64));
        let p = MwceParams::default();
        out.push(check_scalar_fn("mwce", &x, opts, |o| Ok(mwce_loss(o, &lesion, &sil, c, &p)?))?);
        // With the stop flag the weight map is a constant taken at `x`.
        let ps = MwceParams { stop_weight_gradient: true, ..p };
        let frozen = mwce_weight_map(&lesion, &sil, c, &x.map(gradcore::ops::sigmoid), &ps)?.weight;
        out.push(check_scalar_fn("mwce_stop_gradient", &x, opts, |o| {
            let (_, g) = mwce_loss(o, &lesion, &sil, c, &ps)?;
            let l = (0..o.len())
                .map(|i| {
                    let (v, t) = (o.data()[i], lesion.data()[i]);
                    frozen.data()[i] * (t * softplus(-v) + (1.0 - t) * softplus(v))
                })
                .sum();
            Ok((l, g))
        })?);

        let n = rng.random_range(1..6);
        let pred = normal(&[n], &mut rng);
        let target: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        out.push(check_scalar_fn("mse", &pred, opts, |o| {
            let (l, g) = mse_loss(o.data(), &target)?;
            Ok((l, Tensor::new([n], g)?))
        })?);
    }
    Ok(out)
}

/// Checks every op kind on `instances` seeds.
pub fn op_checks(instances: usize, opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for (kind, shapes) in standard_cases() {
        for seed in 0..instances as u64 {
            out.push(grad_check(&kind, &shapes, opts, seed)?);
        }
    }
    Ok(out)
}

/// Whole-network checks at mini scale with batch 2.
pub fn model_checks(opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let profile = Profile::mini();
    let mut out = Vec::new();
    for (i, task) in [Task::Localizer, Task::Segmenter, Task::Classifier].into_iter().enumerate() {
        let model = build::<f64>(task, &profile, 40 + i as u64)?;
        let mut shape = vec![2];
        shape.extend_from_slice(&model.input_shape);
        out.push(grad_check_graph(task.group(), &model.graph, |rng| vec![normal(&shape, rng)], opts, 7 + i as u64)?);
    }
    Ok(out)
}

/// Runs everything; `instances` random draws per op and per loss.
pub fn run_suite(instances: usize) -> Result<Vec<GradCheckReport>> {
    let opts = GradCheckOptions::default();
    let mut all = op_checks(instances, &opts)?;
    all.extend(loss_checks(instances, &opts)?);
    all.extend(model_checks(&opts)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn losses_pass_on_a_few_draws() {
        for r in loss_checks(3, &GradCheckOptions::default()).unwrap() {
            assert!(r.pass, "{r:?}");
        }
    }
}
