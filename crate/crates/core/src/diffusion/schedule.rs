//! Cosine noise schedule and the forward (noising) process.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const COSINE_OFFSET: f64 = 0.008;
const MIN_STEP_RATIO: f64 = 1e-5;
const MAX_STEP_RATIO: f64 = 0.9999;

/// Diffusion step index in `1..=T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DiffusionStep(u32);

impl DiffusionStep {
    pub fn new(index: u32, schedule: &NoiseSchedule) -> Result<Self> {
        if index == 0 || index > schedule.steps() {
            return Err(Error::invalid(format!("diffusion step {index} outside 1..={}", schedule.steps())));
        }
        Ok(Self(index))
    }

    pub fn index(self) -> u32 {
        self.0
    }
}

/// Cumulative signal fractions `ᾱ_0..=ᾱ_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

fn cosine_g(t: f64, total: f64) -> f64 {
    let angle = (t / total + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
    angle.cos().powi(2)
}

/// `ᾱ_t = g(t)/g(0)` with `g(t) = cos²(((t/T + s)/(1+s))·π/2)`, built as a
/// product of single-step ratios clipped to `[1e-5, 0.9999]`.
pub fn cosine_schedule(steps: u32) -> NoiseSchedule {
    let steps = steps.max(1);
    let total = steps as f64;
    let mut alpha_bar = Vec::with_capacity(steps as usize + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for t in 1..=steps {
        let ratio = cosine_g(t as f64, total) / cosine_g((t - 1) as f64, total);
        acc *= ratio.clamp(MIN_STEP_RATIO, MAX_STEP_RATIO);
        alpha_bar.push(acc);
    }
    NoiseSchedule { alpha_bar }
}

impl NoiseSchedule {
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(Error::invalid("alpha_bar must start at exactly 1 and hold at least two entries"));
        }
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0])) || alpha_bar.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::invalid("alpha_bar must be strictly decreasing within [0, 1]"));
        }
        Ok(Self { alpha_bar })
    }

    /// `T`.
    pub fn steps(&self) -> u32 {
        (self.alpha_bar.len() - 1) as u32
    }

    /// `ᾱ_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: u32) -> f64 {
        self.alpha_bar[t as usize]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn diffuse(&self, x0: &Tensor, step: DiffusionStep, noise: &Tensor) -> Result<Tensor> {
        forward_diffuse(x0, noise, self.alpha_bar(step.index()))
    }
}

/// `x_t = √ᾱ·x0 + √(1-ᾱ)·ε`.
pub fn forward_diffuse(x0: &Tensor, noise: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    x0.check_same_shape(noise)?;
    let a = alpha_bar.sqrt();
    let b = (1.0 - alpha_bar).sqrt();
    let data = x0.data().iter().zip(noise.data()).map(|(x, e)| a * x + b * e).collect();
    Ok(Tensor::from_vec(x0.channels(), x0.height(), x0.width(), data))
}
