//! Multi-scale classifier-free guidance, reverse-process samplers and
//! inpainting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{EpsilonModel, NoiseSchedule, Tensor};
use crate::error::{Error, Result};
use crate::features::{Embedding, TextFeaturePyramid};
use crate::layout::BinaryMask;

pub const DEFAULT_GUIDANCE_SCALE: f64 = 3.0;
pub const VISUALIZATION_GUIDANCE_SCALE: f64 = 7.5;
pub const S2I_GUIDANCE_SCALE: f64 = 2.0;
/// Stream offset of the noise used to re-noise the original when inpainting.
const INPAINT_STREAM_OFFSET: u64 = 1 << 32;

/// The pyramid whose every level-0 entry and map cell is the null embedding.
pub fn empty_pyramid(canvas_exponent: u32, null: &Embedding) -> TextFeaturePyramid {
    TextFeaturePyramid::empty(canvas_exponent, null)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub scale: f64,
    /// Levels replaced by null content in the unconditional branch; `None`
    /// means every level `0..=L`.
    #[serde(default)]
    pub drop_levels: Option<Vec<u32>>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { scale: DEFAULT_GUIDANCE_SCALE, drop_levels: None }
    }
}

impl GuidanceConfig {
    pub fn with_scale(scale: f64) -> Self {
        Self { scale, drop_levels: None }
    }

    pub fn validate(&self, canvas_exponent: u32) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("guidance scale must be finite and non-negative, got {}", self.scale)));
        }
        if let Some(levels) = &self.drop_levels {
            if let Some(bad) = levels.iter().find(|&&l| l > canvas_exponent) {
                return Err(Error::invalid(format!("drop level {bad} outside 0..={canvas_exponent}")));
            }
        }
        Ok(())
    }

    fn dropped(&self, canvas_exponent: u32) -> Vec<u32> {
        self.drop_levels.clone().unwrap_or_else(|| (0..=canvas_exponent).collect())
    }
}

/// `ε_uncond + s·(ε_cond − ε_uncond)`, where the unconditional branch nulls
/// the dropped levels. Scales 0 and 1 and an empty drop set evaluate only
/// the branch they reduce to.
pub fn guided_epsilon(
    model: &dyn EpsilonModel,
    x: &Tensor,
    step: u32,
    pyramid: &TextFeaturePyramid,
    guidance: &GuidanceConfig,
) -> Result<Tensor> {
    let l = model.canvas_exponent();
    guidance.validate(l)?;
    let dropped = guidance.dropped(l);
    if guidance.scale == 1.0 || dropped.is_empty() {
        return model.epsilon(x, step, pyramid);
    }
    let z_drop = pyramid.with_levels_nulled(&dropped, model.null_embedding());
    let uncond = model.epsilon(x, step, &z_drop)?;
    if guidance.scale == 0.0 {
        return Ok(uncond);
    }
    let cond = model.epsilon(x, step, pyramid)?;
    Ok(combine_guidance(&cond, &uncond, guidance.scale))
}

pub fn combine_guidance(cond: &Tensor, uncond: &Tensor, scale: f64) -> Tensor {
    uncond.zip_map(cond, |u, c| u + scale * (c - u))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    /// Stochastic ancestral sampling with the posterior variance.
    Ancestral,
    /// Deterministic non-Markovian sampling with zero added noise.
    Ddim,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(Self::Ancestral),
            "ddim" => Ok(Self::Ddim),
            other => Err(Error::invalid(format!("unknown sampler `{other}` (expected ancestral or ddim)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: u32,
    pub kind: SamplerKind,
    pub seed: u64,
    /// Clamp the implied clean image to `[-1, 1]` at every step.
    #[serde(default = "yes")]
    pub clip_denoised: bool,
}

fn yes() -> bool {
    true
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, kind: SamplerKind::Ddim, seed: 0, clip_denoised: true }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.steps() {
            return Err(Error::invalid(format!("sampler steps must lie in 1..={}, got {}", schedule.steps(), self.steps)));
        }
        Ok(())
    }

    fn eta(&self) -> f64 {
        match self.kind {
            SamplerKind::Ancestral => 1.0,
            SamplerKind::Ddim => 0.0,
        }
    }
}

/// Uniform stride over `1..=T`, descending, always holding `T` and (for
/// more than one step) `1`.
pub fn step_sequence(total: u32, steps: u32) -> Vec<u32> {
    if steps <= 1 {
        return vec![total];
    }
    let mut seq: Vec<u32> = (0..steps)
        .map(|i| {
            let f = 1.0 + (total - 1) as f64 * i as f64 / (steps - 1) as f64;
            f.round() as u32
        })
        .collect();
    seq.dedup();
    seq.reverse();
    seq
}

/// One reverse update from step `t` to the earlier step `s` (`s = 0` is the
/// clean image), given the noise estimate. `eta = 1` gives the ancestral
/// posterior, `eta = 0` the deterministic update.
pub fn reverse_step(
    schedule: &NoiseSchedule,
    x: &Tensor,
    eps: &Tensor,
    t: u32,
    s: u32,
    eta: f64,
    clip_denoised: bool,
    noise: Option<&Tensor>,
) -> Tensor {
    let a_t = schedule.alpha_bar(t);
    let a_s = schedule.alpha_bar(s);
    let x0 = x.zip_map(eps, |xv, e| {
        let v = (xv - (1.0 - a_t).sqrt() * e) / a_t.sqrt();
        if clip_denoised {
            v.clamp(-1.0, 1.0)
        } else {
            v
        }
    });
    // Recompute ε from the (possibly clipped) x0 so the update stays on the
    // line through x_t.
    let eps = if clip_denoised { x.zip_map(&x0, |xv, x0v| (xv - a_t.sqrt() * x0v) / (1.0 - a_t).sqrt()) } else { eps.clone() };
    let sigma = eta * ((1.0 - a_s) / (1.0 - a_t) * (1.0 - a_t / a_s)).max(0.0).sqrt();
    let dir = (1.0 - a_s - sigma * sigma).max(0.0).sqrt();
    let mut out = x0.zip_map(&eps, |x0v, e| a_s.sqrt() * x0v + dir * e);
    if let (Some(z), true) = (noise, sigma > 0.0) {
        out = out.zip_map(z, |o, zv| o + sigma * zv);
    }
    out
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Reports `(completed, total)` reverse steps.
pub type Progress<'a> = &'a mut dyn FnMut(usize, usize);

/// Reverse process with an optional per-step composition hook (used by
/// inpainting). `stream` selects the RNG stream for the image index.
fn run_reverse(
    model: &dyn EpsilonModel,
    pyramid: &TextFeaturePyramid,
    guidance: &GuidanceConfig,
    sampler: &SamplerConfig,
    stream: u64,
    mut compose: impl FnMut(u32, Tensor) -> Result<Tensor>,
    progress: Progress<'_>,
) -> Result<Tensor> {
    let schedule = model.schedule();
    sampler.validate(schedule)?;
    guidance.validate(model.canvas_exponent())?;
    if pyramid.canvas_exponent() != model.canvas_exponent() {
        return Err(Error::ShapeMismatch {
            expected: format!("pyramid with L = {}", model.canvas_exponent()),
            actual: format!("L = {}", pyramid.canvas_exponent()),
        });
    }
    let (c, h, w) = model.image_shape();
    let mut rng = rng_for(sampler.seed, stream);
    let seq = step_sequence(schedule.steps(), sampler.steps);
    let mut x = compose(seq[0], Tensor::randn(c, h, w, &mut rng))?;
    for (i, &t) in seq.iter().enumerate() {
        let s = seq.get(i + 1).copied().unwrap_or(0);
        let eps = guided_epsilon(model, &x, t, pyramid, guidance)?;
        let noise = (sampler.kind == SamplerKind::Ancestral && s > 0).then(|| Tensor::randn(c, h, w, &mut rng));
        let next = reverse_step(schedule, &x, &eps, t, s, sampler.eta(), sampler.clip_denoised, noise.as_ref());
        if next.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("sampler produced non-finite values at step {t}")));
        }
        x = compose(s, next)?;
        progress(i + 1, seq.len());
    }
    Ok(x.map(|v| v.clamp(-1.0, 1.0)))
}

/// Draws image `index` of a batch; each index owns an RNG stream of the seed.
pub fn sample_one(
    model: &dyn EpsilonModel,
    pyramid: &TextFeaturePyramid,
    guidance: &GuidanceConfig,
    sampler: &SamplerConfig,
    index: u64,
    progress: Progress<'_>,
) -> Result<Tensor> {
    run_reverse(model, pyramid, guidance, sampler, index, |_, x| Ok(x), progress)
}

pub fn sample(
    model: &dyn EpsilonModel,
    pyramid: &TextFeaturePyramid,
    guidance: &GuidanceConfig,
    sampler: &SamplerConfig,
    count: usize,
) -> Result<Vec<Tensor>> {
    (0..count as u64).map(|k| sample_one(model, pyramid, guidance, sampler, k, &mut |_, _| {})).collect()
}

#[derive(Debug, Clone)]
pub struct InpaintRequest {
    pub original: Tensor,
    /// 1 marks pixels to regenerate.
    pub mask: BinaryMask,
    pub pyramid: TextFeaturePyramid,
    pub guidance: GuidanceConfig,
    pub sampler: SamplerConfig,
}

fn select(mask: &BinaryMask, inside: &Tensor, outside: &Tensor) -> Tensor {
    let plane = inside.plane();
    let bits = mask.bits();
    let mut out = outside.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        if bits[i % plane] {
            *v = inside.data()[i];
        }
    }
    out
}

/// Regenerates the masked pixels. At every step the unmasked pixels are
/// replaced by the original noised to the current level, and the final
/// composition copies the original exactly.
pub fn inpaint(model: &dyn EpsilonModel, request: &InpaintRequest, index: u64, progress: Progress<'_>) -> Result<Tensor> {
    let (c, h, w) = model.image_shape();
    let o = &request.original;
    if (o.channels(), o.height(), o.width()) != (c, h, w) || request.mask.side() != w {
        return Err(Error::ShapeMismatch {
            expected: format!("{c}x{h}x{w} image with a {w}x{w} mask"),
            actual: format!("{}x{}x{} image with a {}x{} mask", o.channels(), o.height(), o.width(), request.mask.side(), request.mask.side()),
        });
    }
    if request.mask.is_empty() {
        return Ok(o.clone());
    }
    let schedule = model.schedule().clone();
    let mut known_rng = rng_for(request.sampler.seed, index + INPAINT_STREAM_OFFSET);
    let compose = |s: u32, x: Tensor| -> Result<Tensor> {
        let known = if s == 0 {
            o.clone()
        } else {
            let noise = Tensor::randn(c, h, w, &mut known_rng);
            crate::diffusion::forward_diffuse(o, &noise, schedule.alpha_bar(s))?
        };
        Ok(select(&request.mask, &x, &known))
    };
    run_reverse(model, &request.pyramid, &request.guidance, &request.sampler, index, compose, progress)
}
