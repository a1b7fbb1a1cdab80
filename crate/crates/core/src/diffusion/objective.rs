//! ε-prediction objective and its gradient.

use rand::Rng;

use super::denoiser::{Conditioning, Denoiser};
use super::schedule::{forward_diffuse, NoiseSchedule};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::features::{Embedding, TextFeaturePyramid};

/// One fully drawn training item: everything random is already fixed.
#[derive(Debug, Clone)]
pub struct PreparedItem {
    pub x0: Tensor,
    pub cond: Conditioning,
    pub step: u32,
    pub noise: Tensor,
}

/// Per-sample draws for a batch: step, noise and level-0 dropout.
pub fn prepare_batch(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    batch: &[(Tensor, TextFeaturePyramid)],
    level0_dropout_prob: f64,
    null: &Embedding,
    rng: &mut impl Rng,
) -> Result<Vec<PreparedItem>> {
    batch
        .iter()
        .map(|(x0, pyramid)| {
            let step = rng.gen_range(1..=schedule.steps());
            let noise = Tensor::randn(x0.channels(), x0.height(), x0.width(), rng);
            let dropped;
            let pyramid = if rng.gen_bool(level0_dropout_prob.clamp(0.0, 1.0)) {
                dropped = pyramid.with_levels_nulled(&[0], null);
                &dropped
            } else {
                pyramid
            };
            Ok(PreparedItem { x0: x0.clone(), cond: net.conditioning(pyramid)?, step, noise })
        })
        .collect()
}

/// `‖ε − ε̂‖²` summed over elements.
pub fn epsilon_loss(noise: &Tensor, prediction: &Tensor) -> f64 {
    noise.squared_distance(prediction)
}

/// Mean over the batch of `‖ε − ε_θ(x_t, z, t)‖²`, and its exact gradient.
pub fn loss_and_grad(net: &Denoiser, params: &[f64], schedule: &NoiseSchedule, items: &[PreparedItem]) -> Result<(f64, Vec<f64>)> {
    if items.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut grads = vec![0.0; params.len()];
    let mut total = 0.0;
    let scale = 1.0 / items.len() as f64;
    for item in items {
        let x_t = forward_diffuse(&item.x0, &item.noise, schedule.alpha_bar(item.step))?;
        let (pred, cache) = net.forward(params, &x_t, item.step as f64, &item.cond);
        total += epsilon_loss(&item.noise, &pred);
        let d_out = pred.zip_map(&item.noise, |p, e| 2.0 * scale * (p - e));
        net.backward(params, &cache, &item.cond, &d_out, &mut grads);
    }
    Ok((total * scale, grads))
}

/// Loss only.
pub fn batch_loss(net: &Denoiser, params: &[f64], schedule: &NoiseSchedule, items: &[PreparedItem]) -> Result<f64> {
    let mut total = 0.0;
    for item in items {
        let x_t = forward_diffuse(&item.x0, &item.noise, schedule.alpha_bar(item.step))?;
        total += epsilon_loss(&item.noise, &net.predict(params, &x_t, item.step as f64, &item.cond));
    }
    Ok(total / items.len() as f64)
}
