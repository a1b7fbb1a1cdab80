//! Seeded training loop for the toy denoiser.

use std::io::Write;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{CheckpointHeader, ModelCheckpoint};
use super::denoiser::{ArchSpec, Denoiser};
use super::objective::{batch_loss, loss_and_grad, prepare_batch, PreparedItem};
use super::optim::{Adam, Ema};
use super::schedule::{cosine_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::features::{EmbeddingProvider, ToyProvider, DEFAULT_TOY_DIM};
use crate::scene::{make_training_example, Dataset, ExampleConfig};

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: u32 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub level0_dropout_prob: f64,
    pub text_only_fraction: f64,
    /// Relative weight of level 0 when drawing per-region precisions.
    pub zero_level_weight: f64,
    /// `None` disables the parameter average.
    pub ema_decay: Option<f64>,
    pub diffusion_steps: u32,
    pub embed_dim: usize,
    pub channels: [usize; 3],
    pub attention: bool,
    /// Scenes held out (from the end of the dataset) for validation.
    pub validation_scenes: usize,
    pub validate_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 15_000,
            batch_size: 16,
            learning_rate: 1e-3,
            level0_dropout_prob: 0.1,
            text_only_fraction: 0.1,
            zero_level_weight: 1.0,
            ema_decay: Some(0.999),
            diffusion_steps: 1000,
            embed_dim: DEFAULT_TOY_DIM,
            channels: [16, 32, 32],
            attention: true,
            validation_scenes: 64,
            validate_every: 100,
            checkpoint_every: 1000,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must lie in [0, 1], got {p}")))
            }
        };
        prob("level0_dropout_prob", self.level0_dropout_prob)?;
        prob("text_only_fraction", self.text_only_fraction)?;
        if let Some(d) = self.ema_decay {
            prob("ema_decay", d)?;
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.diffusion_steps == 0 || self.validate_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::invalid("diffusion_steps, validate_every and checkpoint_every must be positive"));
        }
        self.example_config().validate()
    }

    pub fn example_config(&self) -> ExampleConfig {
        ExampleConfig { text_only_fraction: self.text_only_fraction, zero_level_weight: self.zero_level_weight }
    }

    pub fn arch(&self, canvas_exponent: u32) -> ArchSpec {
        ArchSpec {
            channels: self.channels,
            attention: self.attention,
            ..ArchSpec::toy(canvas_exponent, self.embed_dim, self.diffusion_steps)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub loss: f64,
    /// Per-element validation ε-MSE, when measured at this step.
    pub val_mse: Option<f64>,
}

pub fn write_loss_curve(out: &mut impl Write, curve: &[CurvePoint]) -> std::io::Result<()> {
    writeln!(out, "step,loss,val_mse")?;
    for p in curve {
        match p.val_mse {
            Some(v) => writeln!(out, "{},{},{}", p.step, p.loss, v)?,
            None => writeln!(out, "{},{},", p.step, p.loss)?,
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// Stopped by the divergence rule; the checkpoint is the last good one.
    Diverged { step: u64, loss: f64, initial: f64 },
}

pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub curve: Vec<CurvePoint>,
    pub status: TrainStatus,
}

/// Examples for one step. Each `(step, slot)` pair owns an RNG stream, so the
/// data order depends only on the seed.
fn draw_batch(
    dataset: &Dataset,
    train_len: usize,
    config: &TrainingConfig,
    provider: &ToyProvider,
    net: &Denoiser,
    schedule: &NoiseSchedule,
    step: u64,
) -> Result<Vec<PreparedItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(step);
    let example = config.example_config();
    let mut batch = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size {
        let scene = &dataset.scenes[rng.gen_range(0..train_len)];
        batch.push(make_training_example(scene, dataset.spec(), &example, provider, &mut rng)?);
    }
    prepare_batch(net, schedule, &batch, config.level0_dropout_prob, provider.null_embedding(), &mut rng)
}

fn validation_items(
    dataset: &Dataset,
    train_len: usize,
    config: &TrainingConfig,
    provider: &ToyProvider,
    net: &Denoiser,
    schedule: &NoiseSchedule,
) -> Result<Vec<PreparedItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX);
    let batch = dataset.scenes[train_len..]
        .iter()
        .map(|s| make_training_example(s, dataset.spec(), &config.example_config(), provider, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    prepare_batch(net, schedule, &batch, 0.0, provider.null_embedding(), &mut rng)
}

/// Trains a fresh denoiser on `dataset`.
///
/// `on_checkpoint` receives a snapshot every `checkpoint_every` steps.
pub fn train(
    dataset: &Dataset,
    config: &TrainingConfig,
    mut on_checkpoint: impl FnMut(&ModelCheckpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let spec = dataset.spec();
    let held_out = if dataset.len() > 2 * config.validation_scenes { config.validation_scenes } else { 0 };
    let train_len = dataset.len() - held_out;
    let provider = ToyProvider::new(&spec.concept_names(), config.embed_dim, config.seed)?;
    let arch = config.arch(spec.canvas_exponent);
    let net = Denoiser::new(arch.clone())?;
    let schedule = cosine_schedule(config.diffusion_steps);
    let mut params = net.init_params(config.seed);
    let mut adam = Adam::new(params.len(), config.learning_rate);
    let mut ema = config.ema_decay.map(|d| Ema::new(&params, d));
    let val_items = if held_out > 0 { validation_items(dataset, train_len, config, &provider, &net, &schedule)? } else { Vec::new() };
    let elements = (arch.image_channels * arch.side() * arch.side()) as f64;

    let header = |step: u64| CheckpointHeader {
        arch: arch.clone(),
        schedule: schedule.clone(),
        vocabulary: provider.vocabulary().clone(),
        scene_spec: Some(spec.clone()),
        admissible_levels: spec.admissible_levels.clone(),
        training: Some(config.clone()),
        dataset_checksum: dataset.manifest.checksum().ok(),
        step,
    };
    let snapshot = |params: &[f64], ema: &Option<Ema>| ema.as_ref().map_or_else(|| params.to_vec(), |e| e.params().to_vec());

    log::info!(
        "training {} parameters on {train_len} scenes ({held_out} held out) for {} steps",
        net.num_params(),
        config.steps
    );
    let mut curve = Vec::with_capacity(config.steps as usize);
    let mut initial = None;
    let mut bad_run = 0u32;
    let mut last_good = ModelCheckpoint { header: header(0), params: snapshot(&params, &ema) };
    for step in 1..=config.steps {
        let items = draw_batch(dataset, train_len, config, &provider, &net, &schedule, step)?;
        let (loss, grads) = loss_and_grad(&net, &params, &schedule, &items)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { step });
        }
        let initial_loss = *initial.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * initial_loss {
            bad_run += 1;
            if bad_run >= DIVERGENCE_PATIENCE {
                log::error!("diverged at step {step}; keeping the checkpoint from step {}", last_good.header.step);
                return Ok(TrainOutcome {
                    checkpoint: last_good,
                    curve,
                    status: TrainStatus::Diverged { step, loss, initial: initial_loss },
                });
            }
        } else {
            bad_run = 0;
        }
        adam.step(&mut params, &grads);
        if let Some(e) = &mut ema {
            e.update(&params);
        }
        if bad_run == 0 {
            last_good.header.step = step;
            last_good.params.clear();
            last_good.params.extend_from_slice(ema.as_ref().map_or(&params[..], |e| e.params()));
        }
        let val_mse = if !val_items.is_empty() && (step % config.validate_every == 0 || step == config.steps) {
            Some(batch_loss(&net, &params, &schedule, &val_items)? / elements)
        } else {
            None
        };
        if let Some(v) = val_mse {
            log::info!("step {step}: loss {loss:.3}, validation mse {v:.5}");
        }
        curve.push(CurvePoint { step, loss, val_mse });
        if step % config.checkpoint_every == 0 && step < config.steps {
            on_checkpoint(&ModelCheckpoint { header: header(step), params: snapshot(&params, &ema) })?;
        }
    }
    let checkpoint = ModelCheckpoint { header: header(config.steps), params: snapshot(&params, &ema) };
    Ok(TrainOutcome { checkpoint, curve, status: TrainStatus::Completed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SceneSpec;

    fn tiny_config(steps: u64) -> TrainingConfig {
        TrainingConfig {
            steps,
            batch_size: 2,
            channels: [4, 4, 4],
            embed_dim: 8,
            diffusion_steps: 50,
            validation_scenes: 4,
            validate_every: 2,
            checkpoint_every: 2,
            ..TrainingConfig::default()
        }
    }

    fn tiny_dataset() -> Dataset {
        Dataset::generate(&SceneSpec::toy(3), 1, 12).unwrap()
    }

    #[test]
    fn identical_seeds_give_identical_parameters() {
        let data = tiny_dataset();
        let a = train(&data, &tiny_config(4), |_| Ok(())).unwrap();
        let b = train(&data, &tiny_config(4), |_| Ok(())).unwrap();
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
        assert_eq!(a.curve, b.curve);
        let c = train(&data, &TrainingConfig { seed: 1, ..tiny_config(4) }, |_| Ok(())).unwrap();
        assert_ne!(a.checkpoint.params, c.checkpoint.params);
    }

    #[test]
    fn periodic_checkpoints_and_curve() {
        let data = tiny_dataset();
        let mut seen = Vec::new();
        let out = train(&data, &tiny_config(5), |c| {
            seen.push(c.header.step);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![2, 4]);
        assert_eq!(out.curve.len(), 5);
        assert_eq!(out.status, TrainStatus::Completed);
        assert!(out.curve[1].val_mse.is_some() && out.curve[0].val_mse.is_none() && out.curve[4].val_mse.is_some());
        let mut csv = Vec::new();
        write_loss_curve(&mut csv, &out.curve).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("step,loss,val_mse\n1,"));
    }

    #[test]
    fn huge_learning_rate_trips_the_divergence_rule() {
        let data = tiny_dataset();
        let config = TrainingConfig { learning_rate: 1e3, ema_decay: None, ..tiny_config(400) };
        match train(&data, &config, |_| Ok(())) {
            Ok(out) => {
                let TrainStatus::Diverged { step, .. } = out.status else { panic!("expected divergence") };
                assert!(out.checkpoint.header.step < step);
            }
            Err(Error::NonFinite { .. }) => {}
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn invalid_probabilities_are_rejected() {
        let data = tiny_dataset();
        assert!(train(&data, &TrainingConfig { level0_dropout_prob: 1.5, ..tiny_config(1) }, |_| Ok(())).is_err());
    }
}
