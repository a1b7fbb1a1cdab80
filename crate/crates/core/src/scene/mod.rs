//! Procedural synthetic scenes with exact ground-truth layouts.
//!
//! Scenes are flat-colored shapes over a striped background, rasterized
//! without anti-aliasing, so classifying each pixel by nearest vocabulary
//! color recovers the visible region masks exactly.

mod shards;

pub use shards::{read_manifest, read_shard, read_shards, scene_seed, write_shards, Dataset, DatasetManifest, ShardEntry, MANIFEST_FILE};

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::Tensor;
use crate::error::{Error, Result};
use crate::features::{build_feature_pyramid, EmbeddingProvider, TextFeaturePyramid};
use crate::layout::{resize_binarize, AdmissibleLevels, BinaryMask, Layout, Region};

/// Minimum max-channel distance between any two vocabulary colors.
pub const MIN_COLOR_SEPARATION: u8 = 64;
/// Rows per band of a stripe background.
const STRIPE_PERIOD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Circle,
    Square,
    Triangle,
    /// Full-canvas horizontal bands alternating between two colors.
    StripeBackground,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    pub shape: ShapeFamily,
    /// One color for shapes; two band colors for stripe backgrounds.
    pub colors: Vec<[u8; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas_exponent: u32,
    pub concepts: Vec<ConceptSpec>,
    /// Inclusive range of foreground objects per scene.
    pub object_count: [usize; 2],
    /// Inclusive range of object extents in pixels.
    pub object_size: [usize; 2],
    pub admissible_levels: AdmissibleLevels,
}

impl SceneSpec {
    /// Six shapes (three families in two colors each) and two backgrounds,
    /// with admissible levels `{0} ∪ {3..L}`.
    pub fn toy(canvas_exponent: u32) -> Self {
        let shape = |name: &str, shape, c: [u8; 3]| ConceptSpec { name: name.into(), shape, colors: vec![c] };
        let side = 1usize << canvas_exponent;
        Self {
            canvas_exponent,
            concepts: vec![
                shape("red circle", ShapeFamily::Circle, [224, 32, 32]),
                shape("green circle", ShapeFamily::Circle, [32, 224, 32]),
                shape("blue square", ShapeFamily::Square, [32, 32, 224]),
                shape("yellow square", ShapeFamily::Square, [224, 224, 32]),
                shape("magenta triangle", ShapeFamily::Triangle, [224, 32, 224]),
                shape("cyan triangle", ShapeFamily::Triangle, [32, 224, 224]),
                ConceptSpec {
                    name: "sky stripes".into(),
                    shape: ShapeFamily::StripeBackground,
                    colors: vec![[128, 128, 224], [224, 224, 224]],
                },
                ConceptSpec {
                    name: "field stripes".into(),
                    shape: ShapeFamily::StripeBackground,
                    colors: vec![[32, 128, 32], [128, 128, 32]],
                },
            ],
            object_count: [1, 3],
            object_size: [side / 4, side / 2],
            admissible_levels: AdmissibleLevels::new(3.min(canvas_exponent), canvas_exponent)
                .expect("toy admissible levels"),
        }
    }

    pub fn side(&self) -> usize {
        1 << self.canvas_exponent
    }

    pub fn concept_names(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        let name = name.trim();
        self.concepts.iter().position(|c| c.name == name)
    }

    pub fn backgrounds(&self) -> Vec<usize> {
        self.indices(|s| s == ShapeFamily::StripeBackground)
    }

    pub fn objects(&self) -> Vec<usize> {
        self.indices(|s| s != ShapeFamily::StripeBackground)
    }

    fn indices(&self, keep: impl Fn(ShapeFamily) -> bool) -> Vec<usize> {
        (0..self.concepts.len()).filter(|&i| keep(self.concepts[i].shape)).collect()
    }

    /// Every vocabulary color with the concept it belongs to.
    pub fn palette(&self) -> Vec<([u8; 3], usize)> {
        self.concepts
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.colors.iter().map(move |&col| (col, i)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas_exponent < 2 {
            return Err(Error::invalid("scene canvas exponent must be at least 2"));
        }
        if self.admissible_levels.max_level() != self.canvas_exponent {
            return Err(Error::invalid("admissible levels must end at the canvas exponent"));
        }
        if self.backgrounds().is_empty() || self.objects().is_empty() {
            return Err(Error::invalid("a scene spec needs at least one background and one object concept"));
        }
        for c in &self.concepts {
            let expected = if c.shape == ShapeFamily::StripeBackground { 2 } else { 1 };
            if c.colors.len() != expected {
                return Err(Error::invalid(format!("concept `{}` needs {expected} color(s)", c.name)));
            }
            if c.name.trim().is_empty() {
                return Err(Error::invalid("concept names must be non-empty"));
            }
        }
        let names = self.concept_names();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::invalid(format!("duplicate concept `{n}`")));
            }
        }
        let palette = self.palette();
        for (i, (a, _)) in palette.iter().enumerate() {
            for (b, _) in &palette[i + 1..] {
                if max_channel_distance(*a, *b) < MIN_COLOR_SEPARATION {
                    return Err(Error::invalid(format!(
                        "colors {a:?} and {b:?} are closer than {MIN_COLOR_SEPARATION} in max-channel distance"
                    )));
                }
            }
        }
        let [lo, hi] = self.object_count;
        let [smin, smax] = self.object_size;
        if lo == 0 || lo > hi {
            return Err(Error::invalid("object count range must satisfy 1 <= min <= max"));
        }
        if smin < 2 || smin > smax || smax > self.side() {
            return Err(Error::invalid("object size range must lie within 2..=side"));
        }
        Ok(())
    }
}

pub fn max_channel_distance(a: [u8; 3], b: [u8; 3]) -> u8 {
    (0..3).map(|k| a[k].abs_diff(b[k])).max().unwrap_or(0)
}

/// Maps a byte color channel to the model's `[-1, 1]` range. Computed in
/// `f32` so that images survive the `f32` shard format bit-exactly.
pub fn channel_to_unit(v: u8) -> f64 {
    (v as f32 / 127.5 - 1.0) as f64
}

pub fn unit_to_channel(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// RGB in `[-1, 1]`.
    pub image: Tensor,
    /// Background first, then one region per visible object concept in
    /// order of first placement.
    pub regions: Vec<Region>,
}

impl SyntheticScene {
    pub fn layout(&self, spec: &SceneSpec) -> Layout {
        Layout::new(spec.canvas_exponent, self.regions.clone()).with_admissible(spec.admissible_levels.clone())
    }
}

fn shape_mask(shape: ShapeFamily, side: usize, x0: usize, y0: usize, size: usize) -> BinaryMask {
    let s = size as f64;
    BinaryMask::from_fn(side, |x, y| {
        if x < x0 || y < y0 || x >= x0 + size || y >= y0 + size {
            return false;
        }
        // Pixel centers relative to the bounding box.
        let u = (x - x0) as f64 + 0.5;
        let v = (y - y0) as f64 + 0.5;
        match shape {
            ShapeFamily::Square | ShapeFamily::StripeBackground => true,
            ShapeFamily::Circle => {
                let r = s / 2.0;
                (u - r).powi(2) + (v - r).powi(2) <= r * r
            }
            // Apex at the top center, base along the bottom edge.
            ShapeFamily::Triangle => (u - s / 2.0).abs() <= v / 2.0,
        }
    })
}

/// Deterministic scene for `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = spec.side();
    let backgrounds = spec.backgrounds();
    let objects = spec.objects();
    let background = backgrounds[rng.gen_range(0..backgrounds.len())];
    let count = rng.gen_range(spec.object_count[0]..=spec.object_count[1]);
    // Owner of each pixel: 0 is the background, k is the k-th object.
    let mut owner = vec![0usize; side * side];
    let mut placed = Vec::with_capacity(count);
    for k in 1..=count {
        let concept = objects[rng.gen_range(0..objects.len())];
        let size = rng.gen_range(spec.object_size[0]..=spec.object_size[1]);
        let x0 = rng.gen_range(0..=side - size);
        let y0 = rng.gen_range(0..=side - size);
        let mask = shape_mask(spec.concepts[concept].shape, side, x0, y0, size);
        for (o, &b) in owner.iter_mut().zip(mask.bits()) {
            if b {
                *o = k;
            }
        }
        placed.push(concept);
    }

    let mut image = Tensor::zeros(3, side, side);
    let bg_colors = &spec.concepts[background].colors;
    for y in 0..side {
        for x in 0..side {
            let o = owner[y * side + x];
            let color = if o == 0 {
                bg_colors[(y / STRIPE_PERIOD) % bg_colors.len()]
            } else {
                spec.concepts[placed[o - 1]].colors[0]
            };
            for (k, &v) in color.iter().enumerate() {
                image.data_mut()[k * side * side + y * side + x] = channel_to_unit(v);
            }
        }
    }

    let level = spec.canvas_exponent;
    let mut regions = Vec::with_capacity(count + 1);
    let bg = BinaryMask::from_bits(side, owner.iter().map(|&o| o == 0).collect())?;
    if !bg.is_empty() {
        regions.push(Region::new(bg, spec.concepts[background].name.clone(), level));
    }
    // Instances of the same concept share one region, as the color oracle
    // cannot tell them apart.
    let mut order: Vec<usize> = Vec::new();
    for &c in &placed {
        if !order.contains(&c) {
            order.push(c);
        }
    }
    for concept in order {
        let visible =
            BinaryMask::from_bits(side, owner.iter().map(|&o| o > 0 && placed[o - 1] == concept).collect())?;
        if !visible.is_empty() {
            regions.push(Region::new(visible, spec.concepts[concept].name.clone(), level));
        }
    }
    Ok(SyntheticScene { image, regions })
}

/// Simulates a user-drawn coarse layout: every mask is binarized at side
/// `2^level` and blown back up to the canvas, and precisions are set to
/// `level`.
pub fn coarsen_layout(regions: &[Region], canvas_exponent: u32, level: u32) -> Result<Vec<Region>> {
    if level > canvas_exponent {
        return Err(Error::invalid(format!("level {level} exceeds the canvas exponent {canvas_exponent}")));
    }
    let side = 1usize << canvas_exponent;
    regions
        .iter()
        .map(|r| {
            let small = resize_binarize(&r.mask, 1 << level)?;
            let mut out = r.clone();
            out.mask = small.expand(side >> level);
            out.precision = crate::layout::PrecisionLevel(level);
            Ok(out)
        })
        .collect()
}

/// How training examples draw their per-region precision levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleConfig {
    /// Fraction of examples trained with level 0 only.
    pub text_only_fraction: f64,
    /// Relative weight of level 0 against each positive admissible level
    /// (which all have weight 1) when drawing a region's precision.
    pub zero_level_weight: f64,
}

impl Default for ExampleConfig {
    fn default() -> Self {
        Self { text_only_fraction: 0.1, zero_level_weight: 1.0 }
    }
}

impl ExampleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.text_only_fraction) {
            return Err(Error::invalid("text_only_fraction must lie in [0, 1]"));
        }
        if !(self.zero_level_weight >= 0.0 && self.zero_level_weight.is_finite()) {
            return Err(Error::invalid("zero_level_weight must be finite and non-negative"));
        }
        Ok(())
    }

    /// Probability of each admissible level for a single region.
    pub fn level_distribution(&self, admissible: &AdmissibleLevels) -> Vec<(u32, f64)> {
        let levels = admissible.levels();
        let total = self.zero_level_weight + (levels.len() - 1) as f64;
        levels
            .iter()
            .map(|l| (l.value(), if l.value() == 0 { self.zero_level_weight } else { 1.0 } / total))
            .collect()
    }
}

/// Draws the precision levels of one example.
pub fn sample_precisions(scene: &SyntheticScene, spec: &SceneSpec, config: &ExampleConfig, rng: &mut impl Rng) -> Result<Layout> {
    config.validate()?;
    let mut layout = scene.layout(spec);
    if rng.gen_bool(config.text_only_fraction) {
        return Ok(layout.at_precision(0));
    }
    let dist = config.level_distribution(&spec.admissible_levels);
    let index = WeightedIndex::new(dist.iter().map(|d| d.1)).map_err(|e| Error::invalid(e.to_string()))?;
    for r in &mut layout.regions {
        r.precision = crate::layout::PrecisionLevel(dist[index.sample(rng)].0);
    }
    Ok(layout)
}

/// Image and conditioning pyramid for one training step.
pub fn make_training_example(
    scene: &SyntheticScene,
    spec: &SceneSpec,
    config: &ExampleConfig,
    provider: &dyn EmbeddingProvider,
    rng: &mut impl Rng,
) -> Result<(Tensor, TextFeaturePyramid)> {
    let layout = sample_precisions(scene, spec, config, rng)?;
    Ok((scene.image.clone(), build_feature_pyramid(&layout, provider)?))
}
