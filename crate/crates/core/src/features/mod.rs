//! Text embeddings and the text feature pyramid.
//!
//! At every level `l >= 1` each cell of the feature map is a convex
//! combination of the region embeddings (plus the null embedding for blank
//! space), weighted by the normalized masks of that level. Level 0 is the
//! ordered sequence of region embeddings.

mod provider;

pub use provider::{EmbeddingProvider, OneHotProvider, ToyProvider, ToyVocabulary, DEFAULT_TOY_DIM};

use crate::error::{Error, Result};
use crate::layout::{build_mask_pyramid, validate_layout, BinaryMask, Layout, ValidationReport, ViolationKind};

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.dot(other) / (self.norm() * other.norm())
    }
}

/// Normalized masks `M̂_0..M̂_n` of one level; `maps[0]` is the blank mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedMasks {
    side: usize,
    maps: Vec<Vec<f64>>,
}

impl NormalizedMasks {
    pub fn side(&self) -> usize {
        self.side
    }

    /// Number of maps including the blank one.
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn map(&self, i: usize) -> &[f64] {
        &self.maps[i]
    }

    pub fn at(&self, i: usize, x: usize, y: usize) -> f64 {
        self.maps[i][y * self.side + x]
    }
}

/// `M̂_i = w_i M_i / Σ_j w_j M_j` with `M_0` the blank indicator and `w_0 = 1`.
pub fn normalize_masks(masks: &[BinaryMask], weights: &[f64]) -> Result<NormalizedMasks> {
    if masks.len() != weights.len() {
        return Err(Error::invalid(format!("{} masks but {} weights", masks.len(), weights.len())));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::invalid(format!("weight {w} must be positive")));
    }
    let side = match masks.first() {
        Some(m) => m.side(),
        None => return Err(Error::invalid("normalize_masks needs the level side; use normalize_masks_with_side")),
    };
    normalize_masks_with_side(side, masks, weights)
}

/// Like [`normalize_masks`] but accepts an empty mask list.
pub fn normalize_masks_with_side(side: usize, masks: &[BinaryMask], weights: &[f64]) -> Result<NormalizedMasks> {
    if masks.len() != weights.len() {
        return Err(Error::invalid(format!("{} masks but {} weights", masks.len(), weights.len())));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::invalid(format!("weight {w} must be positive")));
    }
    if let Some(m) = masks.iter().find(|m| m.side() != side) {
        return Err(Error::ShapeMismatch { expected: format!("side {side}"), actual: format!("side {}", m.side()) });
    }
    let cells = side * side;
    let mut maps = vec![vec![0.0; cells]; masks.len() + 1];
    for k in 0..cells {
        let total: f64 = masks.iter().zip(weights).filter(|(m, _)| m.bits()[k]).map(|(_, w)| w).sum();
        if total == 0.0 {
            maps[0][k] = 1.0;
            continue;
        }
        for (i, (m, w)) in masks.iter().zip(weights).enumerate() {
            if m.bits()[k] {
                maps[i + 1][k] = w / total;
            }
        }
    }
    Ok(NormalizedMasks { side, maps })
}

/// A `side x side` grid of `dim`-vectors stored channel-major (`[c][y][x]`).
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatureMap {
    side: usize,
    dim: usize,
    data: Vec<f64>,
}

impl TextFeatureMap {
    pub fn constant(side: usize, value: &Embedding) -> Self {
        let cells = side * side;
        let mut data = Vec::with_capacity(value.dim() * cells);
        for &v in value.as_slice() {
            data.extend(std::iter::repeat(v).take(cells));
        }
        Self { side, dim: value.dim(), data }
    }

    pub fn from_channel_major(side: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != side * side * dim {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values", side * side * dim),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self { side, dim, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Channel-major values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, channel: usize, x: usize, y: usize) -> f64 {
        self.data[(channel * self.side + y) * self.side + x]
    }

    pub fn cell(&self, x: usize, y: usize) -> Vec<f64> {
        (0..self.dim).map(|c| self.get(c, x, y)).collect()
    }
}

/// `Z_{x,y} = Σ_i f(t_i) M̂_{i,x,y}` with `f(t_0)` the null embedding.
pub fn build_feature_map(norm: &NormalizedMasks, embeddings: &[Embedding], null: &Embedding) -> Result<TextFeatureMap> {
    if embeddings.len() + 1 != norm.len() {
        return Err(Error::invalid(format!(
            "{} embeddings for {} normalized region masks",
            embeddings.len(),
            norm.len() - 1
        )));
    }
    let dim = null.dim();
    if let Some(e) = embeddings.iter().find(|e| e.dim() != dim) {
        return Err(Error::ShapeMismatch { expected: format!("dimension {dim}"), actual: format!("dimension {}", e.dim()) });
    }
    let side = norm.side();
    let cells = side * side;
    let vectors: Vec<&Embedding> = std::iter::once(null).chain(embeddings).collect();
    let mut data = vec![0.0; dim * cells];
    let mut cell = vec![0.0; dim];
    for k in 0..cells {
        // Zero-weight terms are skipped and the first term is assigned rather
        // than accumulated, so a blank cell is bit-identical to `null`.
        let mut first = true;
        for (i, v) in vectors.iter().enumerate() {
            let w = norm.maps[i][k];
            if w == 0.0 {
                continue;
            }
            for (c, &e) in v.as_slice().iter().enumerate() {
                if first {
                    cell[c] = e * w;
                } else {
                    cell[c] += e * w;
                }
            }
            first = false;
        }
        for c in 0..dim {
            data[c * cells + k] = cell[c];
        }
    }
    Ok(TextFeatureMap { side, dim, data })
}

/// Level-0 embedding sequence plus one feature map per level `1..=L`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeaturePyramid {
    canvas_exponent: u32,
    level0: Vec<Embedding>,
    maps: Vec<TextFeatureMap>,
}

impl TextFeaturePyramid {
    pub fn new(canvas_exponent: u32, level0: Vec<Embedding>, maps: Vec<TextFeatureMap>) -> Result<Self> {
        if level0.is_empty() {
            return Err(Error::invalid("level-0 sequence must hold at least one entry"));
        }
        if maps.len() != canvas_exponent as usize {
            return Err(Error::invalid(format!("{} maps for canvas exponent {canvas_exponent}", maps.len())));
        }
        let dim = level0[0].dim();
        for (k, m) in maps.iter().enumerate() {
            if m.side() != 1 << (k + 1) || m.dim() != dim {
                return Err(Error::ShapeMismatch {
                    expected: format!("level {} map of side {} and dim {dim}", k + 1, 1 << (k + 1)),
                    actual: format!("side {} dim {}", m.side(), m.dim()),
                });
            }
        }
        if level0.iter().any(|e| e.dim() != dim) {
            return Err(Error::invalid("level-0 embeddings disagree on dimension"));
        }
        Ok(Self { canvas_exponent, level0, maps })
    }

    /// Every level is the null embedding.
    pub fn empty(canvas_exponent: u32, null: &Embedding) -> Self {
        Self::text_only(canvas_exponent, null, vec![null.clone()])
    }

    /// Given level-0 sequence, null everywhere else.
    pub fn text_only(canvas_exponent: u32, null: &Embedding, level0: Vec<Embedding>) -> Self {
        let level0 = if level0.is_empty() { vec![null.clone()] } else { level0 };
        let maps = (1..=canvas_exponent).map(|l| TextFeatureMap::constant(1 << l, null)).collect();
        Self { canvas_exponent, level0, maps }
    }

    pub fn canvas_exponent(&self) -> u32 {
        self.canvas_exponent
    }

    pub fn dim(&self) -> usize {
        self.level0[0].dim()
    }

    pub fn level0(&self) -> &[Embedding] {
        &self.level0
    }

    /// Feature map of level `l >= 1`.
    pub fn map(&self, l: u32) -> &TextFeatureMap {
        assert!(l >= 1 && l <= self.canvas_exponent, "level {l} has no feature map");
        &self.maps[l as usize - 1]
    }

    /// Replace the given levels with null content. Level 0 becomes the
    /// single-entry null sequence.
    pub fn with_levels_nulled(&self, levels: &[u32], null: &Embedding) -> Self {
        let mut out = self.clone();
        for &l in levels {
            if l == 0 {
                out.level0 = vec![null.clone()];
            } else if l <= self.canvas_exponent {
                out.maps[l as usize - 1] = TextFeatureMap::constant(1 << l, null);
            }
        }
        out
    }
}

/// Structural validation plus a check that every region text is known to
/// `provider`.
pub fn validate_for_provider(layout: &Layout, provider: &dyn EmbeddingProvider) -> ValidationReport {
    let mut report = validate_layout(layout);
    for (i, r) in layout.regions.iter().enumerate() {
        if !r.text.trim().is_empty() && matches!(provider.embed(&r.text), Err(Error::UnknownConcept(_))) {
            report.push(ViolationKind::UnknownConcept, Some(i), format!("unknown concept `{}`", r.text));
        }
    }
    report
}

pub fn build_feature_pyramid(layout: &Layout, provider: &dyn EmbeddingProvider) -> Result<TextFeaturePyramid> {
    let masks = build_mask_pyramid(layout)?;
    let embeddings = layout.texts().map(|t| provider.embed(t)).collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = layout.regions.iter().map(|r| r.weight).collect();
    let null = provider.null_embedding();
    let maps = (1..=layout.canvas_exponent)
        .map(|l| {
            let norm = normalize_masks_with_side(1 << l, masks.level(l), &weights)?;
            build_feature_map(&norm, &embeddings, null)
        })
        .collect::<Result<Vec<_>>>()?;
    let level0 = if embeddings.is_empty() { vec![null.clone()] } else { embeddings };
    Ok(TextFeaturePyramid { canvas_exponent: layout.canvas_exponent, level0, maps })
}
