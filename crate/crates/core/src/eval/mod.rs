//! SS score, concept fidelity and the precision-trend report.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::diffusion::{EpsilonModel, Tensor};
use crate::error::{Error, Result};
use crate::features::{build_feature_pyramid, EmbeddingProvider};
use crate::layout::{BinaryMask, Layout, Region};
use crate::sampling::{sample_one, GuidanceConfig, SamplerConfig};
use crate::scene::{max_channel_distance, unit_to_channel, SceneSpec};

pub const CLASSIFIER_ID: &str = "nearest-color/max-channel-32";
/// Largest max-channel distance at which a pixel still takes a color's label.
pub const MAX_COLOR_DISTANCE: u8 = 32;
/// A concept counts as present when its reconstructed area reaches this
/// fraction of the commanded area.
pub const PRESENCE_FRACTION: f64 = 0.25;
/// Below this many layouts a trend report carries a warning.
pub const MIN_TREND_LAYOUTS: usize = 20;

/// Per-pixel concept labels recovered from an image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconstructedLayout {
    pub side: usize,
    /// Concept index per pixel (row-major), `None` for unclassified.
    pub labels: Vec<Option<usize>>,
    pub classifier: String,
}

impl ReconstructedLayout {
    pub fn mask(&self, concept: usize) -> BinaryMask {
        BinaryMask::from_bits(self.side, self.labels.iter().map(|&l| l == Some(concept)).collect()).expect("square label grid")
    }

    pub fn unclassified(&self) -> BinaryMask {
        BinaryMask::from_bits(self.side, self.labels.iter().map(|l| l.is_none()).collect()).expect("square label grid")
    }

    /// One full-precision region per concept found, in vocabulary order.
    pub fn to_layout(&self, spec: &SceneSpec) -> Layout {
        let regions = (0..spec.concepts.len())
            .map(|c| (c, self.mask(c)))
            .filter(|(_, m)| !m.is_empty())
            .map(|(c, m)| Region::new(m, spec.concepts[c].name.clone(), spec.canvas_exponent))
            .collect();
        Layout::new(spec.canvas_exponent, regions).with_admissible(spec.admissible_levels.clone())
    }
}

/// Labels each pixel with the concept of the nearest vocabulary color when
/// that color lies within [`MAX_COLOR_DISTANCE`].
pub fn reconstruct_layout(image: &Tensor, spec: &SceneSpec) -> ReconstructedLayout {
    let side = image.width();
    let plane = image.plane();
    let palette = spec.palette();
    let labels = (0..plane)
        .map(|p| {
            let rgb = [0, 1, 2].map(|k| unit_to_channel(image.data()[k * plane + p]));
            palette
                .iter()
                .map(|&(color, concept)| (max_channel_distance(rgb, color), concept))
                .min_by_key(|&(d, _)| d)
                .filter(|&(d, _)| d <= MAX_COLOR_DISTANCE)
                .map(|(_, c)| c)
        })
        .collect();
    ReconstructedLayout { side, labels, classifier: CLASSIFIER_ID.into() }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na * nb)).clamp(-1.0, 1.0),
    }
}

/// Per-level cosine similarities for levels `l_min..=L` of the input's
/// admissible set. The input pyramid uses the input's own precisions, the
/// reconstruction is taken at full precision.
pub fn ss_levels(input: &Layout, reconstructed: &Layout, provider: &dyn EmbeddingProvider) -> Result<Vec<(u32, f64)>> {
    if input.canvas_exponent != reconstructed.canvas_exponent {
        return Err(Error::ShapeMismatch {
            expected: format!("canvas exponent {}", input.canvas_exponent),
            actual: format!("{}", reconstructed.canvas_exponent),
        });
    }
    let l = input.canvas_exponent;
    let full = reconstructed.at_precision(l).with_admissible(input.admissible.clone());
    let a = build_feature_pyramid(input, provider)?;
    let b = build_feature_pyramid(&full, provider)?;
    Ok((input.admissible.min_level()..=l).map(|level| (level, cosine(a.map(level).data(), b.map(level).data()))).collect())
}

/// Mean over levels of [`ss_levels`].
pub fn ss_score(input: &Layout, reconstructed: &Layout, provider: &dyn EmbeddingProvider) -> Result<f64> {
    let levels = ss_levels(input, reconstructed, provider)?;
    Ok(levels.iter().map(|l| l.1).sum::<f64>() / levels.len() as f64)
}

fn commanded_masks(layout: &Layout, spec: &SceneSpec) -> Result<Vec<(usize, BinaryMask)>> {
    let side = layout.side();
    let mut out: Vec<(usize, BinaryMask)> = Vec::new();
    for r in &layout.regions {
        let c = spec.index_of(&r.text).ok_or_else(|| Error::UnknownConcept(r.text.clone()))?;
        let entry = match out.iter().position(|e| e.0 == c) {
            Some(i) => &mut out[i].1,
            None => {
                out.push((c, BinaryMask::zeros(side)));
                &mut out.last_mut().unwrap().1
            }
        };
        for y in 0..side {
            for x in 0..side {
                if r.mask.get(x, y) {
                    entry.set(x, y, true);
                }
            }
        }
    }
    Ok(out)
}

/// Fraction of the layout's concepts whose reconstructed area reaches a
/// quarter of their commanded area.
pub fn concept_fidelity(image: &Tensor, layout: &Layout, spec: &SceneSpec) -> Result<f64> {
    let recon = reconstruct_layout(image, spec);
    let commanded = commanded_masks(layout, spec)?;
    if commanded.is_empty() {
        return Ok(1.0);
    }
    let present = commanded
        .iter()
        .filter(|(c, m)| recon.mask(*c).count_ones() as f64 >= PRESENCE_FRACTION * m.count_ones() as f64)
        .count();
    Ok(present as f64 / commanded.len() as f64)
}

/// Whether `concept` is localized in `target`: its pixels inside `target`
/// cover at least a quarter of `target`, and outnumber its pixels outside.
pub fn concept_localized(image: &Tensor, spec: &SceneSpec, concept: &str, target: &BinaryMask) -> Result<bool> {
    let c = spec.index_of(concept).ok_or_else(|| Error::UnknownConcept(concept.into()))?;
    let found = reconstruct_layout(image, spec).mask(c);
    let inside = found.bits().iter().zip(target.bits()).filter(|(f, t)| **f && **t).count();
    let outside = found.count_ones() - inside;
    Ok(inside as f64 >= PRESENCE_FRACTION * target.count_ones() as f64 && inside > outside)
}

/// Two-sided paired t-test on the differences. All-zero differences give
/// `p = 1`; constant non-zero differences give `p = 0`.
pub fn paired_t_test(diffs: &[f64]) -> (f64, f64) {
    let n = diffs.len();
    if n < 2 {
        return (0.0, 1.0);
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) };
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
    (t, 2.0 * (1.0 - dist.cdf(t.abs())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub level: u32,
    pub mean_ss: f64,
    pub mean_fidelity: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub lower: u32,
    pub upper: u32,
    /// Mean of `SS(upper) − SS(lower)` over (layout, seed) pairs.
    pub mean_diff: f64,
    pub t: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub levels: Vec<LevelRow>,
    pub paired: Vec<PairedComparison>,
    pub seeds: Vec<u64>,
    pub layouts: usize,
    pub strictly_increasing: bool,
    /// `SS(last level) − SS(first level)`.
    pub gain: f64,
    pub warning: Option<String>,
    pub guidance: GuidanceConfig,
    pub sampler_steps: u32,
    /// SS per level, then layout, then seed.
    pub scores: Vec<Vec<f64>>,
}

impl TrendReport {
    pub fn holds(&self, min_gain: f64) -> bool {
        self.strictly_increasing && self.gain >= min_gain
    }

    /// The paired comparison between the first and last level.
    pub fn end_to_end(&self) -> Option<&PairedComparison> {
        let (lo, hi) = (self.levels.first()?.level, self.levels.last()?.level);
        self.paired.iter().find(|p| p.lower == lo && p.upper == hi)
    }

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "level,mean_ss,mean_fidelity,samples")?;
        for r in &self.levels {
            writeln!(out, "{},{},{},{}", r.level, r.mean_ss, r.mean_fidelity, r.samples)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrendOptions {
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
}

impl Default for TrendOptions {
    fn default() -> Self {
        Self { threads: 0 }
    }
}

/// Runs `f` over `0..n` on scoped threads; results keep index order.
fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = if threads == 0 { std::thread::available_parallelism().map_or(1, |p| p.get()) } else { threads };
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let v = f(i);
                results.lock().unwrap()[i] = Some(v);
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every index computed")).collect()
}

/// Samples every layout at every level with the same seeds (paired design)
/// and scores each image against the layout as authored.
pub fn precision_trend(
    model: &dyn EpsilonModel,
    provider: &dyn EmbeddingProvider,
    spec: &SceneSpec,
    layouts: &[Layout],
    levels: &[u32],
    seeds: &[u64],
    guidance: &GuidanceConfig,
    sampler: &SamplerConfig,
    options: TrendOptions,
) -> Result<TrendReport> {
    if layouts.is_empty() || levels.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("precision_trend needs at least one layout, level and seed"));
    }
    for &l in levels {
        if l != 0 && !spec.admissible_levels.contains(crate::layout::PrecisionLevel(l)) {
            return Err(Error::invalid(format!("level {l} is not admissible")));
        }
    }
    let jobs: Vec<(usize, usize, usize)> = (0..levels.len())
        .flat_map(|li| (0..layouts.len()).flat_map(move |ci| (0..seeds.len()).map(move |si| (li, ci, si))))
        .collect();
    let results = parallel_map(jobs.len(), options.threads, |j| -> Result<(f64, f64)> {
        let (li, ci, si) = jobs[j];
        let authored = &layouts[ci];
        let pyramid = build_feature_pyramid(&authored.at_precision(levels[li]), provider)?;
        let cfg = SamplerConfig { seed: seeds[si], ..sampler.clone() };
        let image = sample_one(model, &pyramid, guidance, &cfg, 0, &mut |_, _| {})?;
        let recon = reconstruct_layout(&image, spec).to_layout(spec);
        Ok((ss_score(authored, &recon, provider)?, concept_fidelity(&image, authored, spec)?))
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let per_level = layouts.len() * seeds.len();
    let scores: Vec<Vec<f64>> = results.chunks(per_level).map(|c| c.iter().map(|r| r.0).collect()).collect();
    let rows: Vec<LevelRow> = results
        .chunks(per_level)
        .zip(levels)
        .map(|(c, &level)| LevelRow {
            level,
            mean_ss: c.iter().map(|r| r.0).sum::<f64>() / c.len() as f64,
            mean_fidelity: c.iter().map(|r| r.1).sum::<f64>() / c.len() as f64,
            samples: c.len(),
        })
        .collect();
    let compare = |a: usize, b: usize| {
        let diffs: Vec<f64> = scores[b].iter().zip(&scores[a]).map(|(hi, lo)| hi - lo).collect();
        let (t, p) = paired_t_test(&diffs);
        PairedComparison {
            lower: levels[a],
            upper: levels[b],
            mean_diff: diffs.iter().sum::<f64>() / diffs.len() as f64,
            t,
            p,
        }
    };
    let mut paired: Vec<PairedComparison> = (1..levels.len()).map(|i| compare(i - 1, i)).collect();
    if levels.len() > 2 {
        paired.push(compare(0, levels.len() - 1));
    }
    let strictly_increasing = rows.windows(2).all(|w| w[1].mean_ss > w[0].mean_ss);
    let gain = rows.last().unwrap().mean_ss - rows[0].mean_ss;
    let warning = (layouts.len() < MIN_TREND_LAYOUTS)
        .then(|| format!("only {} layouts; at least {MIN_TREND_LAYOUTS} are recommended", layouts.len()));
    Ok(TrendReport {
        levels: rows,
        paired,
        seeds: seeds.to_vec(),
        layouts: layouts.len(),
        strictly_increasing,
        gain,
        warning,
        guidance: guidance.clone(),
        sampler_steps: sampler.steps,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ToyProvider;
    use crate::scene::{channel_to_unit, generate_scene};

    fn setup() -> (SceneSpec, ToyProvider) {
        let spec = SceneSpec::toy(5);
        let provider = ToyProvider::new(&spec.concept_names(), 16, 0).unwrap();
        (spec, provider)
    }

    #[test]
    fn ground_truth_scenes_reconstruct_exactly() {
        let (spec, provider) = setup();
        for seed in 0..30 {
            let scene = generate_scene(&spec, seed).unwrap();
            let recon = reconstruct_layout(&scene.image, &spec);
            assert!(recon.unclassified().is_empty());
            for r in &scene.regions {
                let m = recon.mask(spec.index_of(&r.text).unwrap());
                assert!(r.mask.bits().iter().zip(m.bits()).all(|(g, f)| !g || *f));
            }
            let layout = scene.layout(&spec);
            let score = ss_score(&layout, &recon.to_layout(&spec), &provider).unwrap();
            assert!((score - 1.0).abs() < 1e-9, "seed {seed}: {score}");
            assert_eq!(concept_fidelity(&scene.image, &layout, &spec).unwrap(), 1.0);
        }
    }

    #[test]
    fn gray_image_is_unclassified() {
        let (spec, _) = setup();
        let gray = Tensor::from_vec(3, 32, 32, vec![channel_to_unit(176); 3 * 1024]);
        let recon = reconstruct_layout(&gray, &spec);
        assert_eq!(recon.unclassified().count_ones(), 1024);
        let scene = generate_scene(&spec, 0).unwrap();
        assert_eq!(concept_fidelity(&gray, &scene.layout(&spec), &spec).unwrap(), 0.0);
    }

    #[test]
    fn flipping_one_pixel_reassigns_only_that_pixel() {
        let (spec, _) = setup();
        let scene = generate_scene(&spec, 4).unwrap();
        let before = reconstruct_layout(&scene.image, &spec);
        let mut img = scene.image.clone();
        let target = spec.concepts[5].colors[0];
        let p = 7 * 32 + 9;
        for k in 0..3 {
            img.data_mut()[k * 1024 + p] = channel_to_unit(target[k]);
        }
        let after = reconstruct_layout(&img, &spec);
        for q in 0..1024 {
            if q == p {
                assert_eq!(after.labels[q], Some(5));
            } else {
                assert_eq!(after.labels[q], before.labels[q]);
            }
        }
    }

    #[test]
    fn empty_reconstruction_matches_scalar_cosine() {
        let (spec, provider) = setup();
        let layout = Layout::new(5, vec![Region::new(BinaryMask::rect(32, 0, 0, 16, 32), "red circle", 5)])
            .with_admissible(spec.admissible_levels.clone());
        let empty = Layout::empty(5);
        let levels = ss_levels(&layout, &empty, &provider).unwrap();
        let f = provider.embed("red circle").unwrap();
        let null = provider.null_embedding();
        // Half the cells hold f, half hold null; the other map is all null.
        let dot = 0.5 * f.dot(null) + 0.5 * null.dot(null);
        let na = (0.5 * f.dot(&f) + 0.5 * null.dot(null)).sqrt();
        let nb = null.norm();
        for (_, c) in &levels {
            assert!((c - dot / (na * nb)).abs() < 1e-12);
        }
        assert_eq!(levels.iter().map(|l| l.0).collect::<Vec<_>>(), vec![3, 4, 5]);
    }

    #[test]
    fn level_cosines_are_symmetric() {
        let (spec, provider) = setup();
        let a = generate_scene(&spec, 1).unwrap().layout(&spec);
        let b = generate_scene(&spec, 2).unwrap().layout(&spec);
        let ab = ss_levels(&a, &b, &provider).unwrap();
        let ba = ss_levels(&b, &a, &provider).unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            assert!((x.1 - y.1).abs() < 1e-12);
        }
    }

    #[test]
    fn fidelity_counts_present_concepts() {
        let (spec, _) = setup();
        let side = 32;
        let mut img = Tensor::zeros(3, side, side);
        let red = spec.concepts[0].colors[0];
        let gray = channel_to_unit(176);
        for y in 0..side {
            for x in 0..side {
                for k in 0..3 {
                    img.data_mut()[k * 1024 + y * side + x] = if x < 16 { channel_to_unit(red[k]) } else { gray };
                }
            }
        }
        let layout = Layout::new(5, vec![
            Region::new(BinaryMask::rect(32, 0, 0, 16, 32), "red circle", 5),
            Region::new(BinaryMask::rect(32, 16, 0, 32, 32), "blue square", 5),
        ]);
        assert_eq!(concept_fidelity(&img, &layout, &spec).unwrap(), 0.5);
        assert!(concept_localized(&img, &spec, "red circle", &BinaryMask::rect(32, 0, 0, 16, 32)).unwrap());
        assert!(!concept_localized(&img, &spec, "red circle", &BinaryMask::rect(32, 16, 0, 32, 32)).unwrap());
    }

    #[test]
    fn paired_t_test_matches_reference_values() {
        // d = [1, 2, 3, 4]: mean 2.5, sd 1.2910, t = 3.8730, df 3, p = 0.030466.
        let (t, p) = paired_t_test(&[1.0, 2.0, 3.0, 4.0]);
        assert!((t - 3.872983346).abs() < 1e-6);
        assert!((p - 0.030466).abs() < 1e-5, "{p}");
        assert_eq!(paired_t_test(&[0.0; 10]), (0.0, 1.0));
        assert_eq!(paired_t_test(&[0.5; 10]).1, 0.0);
    }

    #[test]
    fn parallel_map_keeps_order() {
        assert_eq!(parallel_map(50, 4, |i| i * i), (0..50).map(|i| i * i).collect::<Vec<_>>());
        assert_eq!(parallel_map(3, 1, |i| i), vec![0, 1, 2]);
    }
}
