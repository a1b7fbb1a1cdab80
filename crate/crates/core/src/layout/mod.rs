//! Layout data model and the precision-encoded mask pyramid.
//!
//! A [`Layout`] is an ordered list of [`Region`]s, each pairing a binary mask
//! at canvas resolution with a free-form text and a precision level. The
//! mask pyramid keeps, at every level `l`, the region masks downsampled to
//! `2^l x 2^l`, zeroed for regions whose precision is below `l`.

pub mod format;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-region precision level. `0` ignores the mask entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrecisionLevel(pub u32);

impl PrecisionLevel {
    pub const TEXT_ONLY: PrecisionLevel = PrecisionLevel(0);

    pub fn value(self) -> u32 {
        self.0
    }
}

impl fmt::Display for PrecisionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The set of precision levels a layout accepts: `{0} ∪ {l_min..=L}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct AdmissibleLevels {
    min_level: u32,
    max_level: u32,
}

impl AdmissibleLevels {
    pub fn new(min_level: u32, max_level: u32) -> Result<Self> {
        if min_level == 0 || min_level > max_level {
            return Err(Error::invalid(format!(
                "admissible range {min_level}..={max_level} must satisfy 1 <= l_min <= L"
            )));
        }
        Ok(Self { min_level, max_level })
    }

    /// `{0} ∪ {L-3..=L}`, clamped so that `l_min >= 1`.
    pub fn default_for(canvas_exponent: u32) -> Self {
        Self {
            min_level: canvas_exponent.saturating_sub(3).max(1),
            max_level: canvas_exponent,
        }
    }

    pub fn min_level(&self) -> u32 {
        self.min_level
    }

    pub fn max_level(&self) -> u32 {
        self.max_level
    }

    pub fn contains(&self, level: PrecisionLevel) -> bool {
        level.0 == 0 || (self.min_level..=self.max_level).contains(&level.0)
    }

    pub fn levels(&self) -> Vec<PrecisionLevel> {
        std::iter::once(0)
            .chain(self.min_level..=self.max_level)
            .map(PrecisionLevel)
            .collect()
    }

    /// Admissible level closest to `requested`; ties go to the lower level.
    pub fn snap(&self, requested: u32) -> PrecisionLevel {
        self.levels()
            .into_iter()
            .min_by_key(|l| (l.0.abs_diff(requested), l.0))
            .expect("admissible set always contains 0")
    }
}

impl TryFrom<Vec<u32>> for AdmissibleLevels {
    type Error = String;

    fn try_from(mut levels: Vec<u32>) -> Result<Self, String> {
        levels.sort_unstable();
        levels.dedup();
        if levels.first() != Some(&0) || levels.len() < 2 {
            return Err(format!("admissible levels {levels:?} must contain 0 and at least one positive level"));
        }
        let min = levels[1];
        let max = *levels.last().unwrap();
        if levels[1..] != (min..=max).collect::<Vec<_>>()[..] {
            return Err(format!("positive admissible levels {:?} must be contiguous", &levels[1..]));
        }
        Ok(Self { min_level: min, max_level: max })
    }
}

impl From<AdmissibleLevels> for Vec<u32> {
    fn from(a: AdmissibleLevels) -> Self {
        a.levels().into_iter().map(|l| l.0).collect()
    }
}

/// Dense square binary mask.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    side: usize,
    bits: Vec<bool>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BinaryMask({}x{})", self.side, self.side)?;
        for row in self.bits.chunks(self.side) {
            let line: String = row.iter().map(|&b| if b { '#' } else { '.' }).collect();
            writeln!(f, "  {line}")?;
        }
        Ok(())
    }
}

impl BinaryMask {
    pub fn zeros(side: usize) -> Self {
        Self { side, bits: vec![false; side * side] }
    }

    pub fn ones(side: usize) -> Self {
        Self { side, bits: vec![true; side * side] }
    }

    pub fn from_bits(side: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != side * side {
            return Err(Error::ShapeMismatch {
                expected: format!("{} bits", side * side),
                actual: format!("{} bits", bits.len()),
            });
        }
        Ok(Self { side, bits })
    }

    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                bits.push(f(x, y));
            }
        }
        Self { side, bits }
    }

    /// Axis-aligned rectangle `[x0, x1) x [y0, y1)`.
    pub fn rect(side: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self::from_fn(side, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.side + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.side + x] = value;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Nearest-neighbour expansion by an integer factor.
    pub fn expand(&self, factor: usize) -> BinaryMask {
        let side = self.side * factor;
        BinaryMask::from_fn(side, |x, y| self.get(x / factor, y / factor))
    }
}

/// Downsample `mask` to `side x side` by block area-average, thresholded at
/// one half with exact ties going to 1.
pub fn resize_binarize(mask: &BinaryMask, side: usize) -> Result<BinaryMask> {
    if side == 0 || side > mask.side || mask.side % side != 0 {
        return Err(Error::invalid(format!(
            "cannot resize a {0}x{0} mask to {1}x{1}: target side must divide the source side",
            mask.side, side
        )));
    }
    let block = mask.side / side;
    let area = block * block;
    let mut out = BinaryMask::zeros(side);
    for by in 0..side {
        for bx in 0..side {
            let mut count = 0;
            for y in by * block..(by + 1) * block {
                let row = &mask.bits[y * mask.side + bx * block..y * mask.side + (bx + 1) * block];
                count += row.iter().filter(|&&b| b).count();
            }
            out.bits[by * side + bx] = 2 * count >= area;
        }
    }
    Ok(out)
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub mask: BinaryMask,
    pub text: String,
    pub precision: PrecisionLevel,
    /// Relative contribution where this region overlaps others.
    pub weight: f64,
}

impl Region {
    pub fn new(mask: BinaryMask, text: impl Into<String>, precision: u32) -> Self {
        Self { mask, text: text.into(), precision: PrecisionLevel(precision), weight: default_weight() }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub canvas_exponent: u32,
    pub admissible: AdmissibleLevels,
    pub regions: Vec<Region>,
}

impl Layout {
    pub fn new(canvas_exponent: u32, regions: Vec<Region>) -> Self {
        Self { canvas_exponent, admissible: AdmissibleLevels::default_for(canvas_exponent), regions }
    }

    pub fn with_admissible(mut self, admissible: AdmissibleLevels) -> Self {
        self.admissible = admissible;
        self
    }

    pub fn empty(canvas_exponent: u32) -> Self {
        Self::new(canvas_exponent, Vec::new())
    }

    pub fn side(&self) -> usize {
        1 << self.canvas_exponent
    }

    /// Copy with every region's precision set to `level`. The admissible set
    /// is not consulted.
    pub fn at_precision(&self, level: u32) -> Layout {
        let mut out = self.clone();
        for r in &mut out.regions {
            r.precision = PrecisionLevel(level);
        }
        out
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.regions.iter().map(|r| r.text.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    CanvasExponent,
    AdmissibleLevels,
    MaskSize,
    PrecisionLevel,
    EmptyText,
    NonPositiveWeight,
    UnknownConcept,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub region: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    pub fn push(&mut self, kind: ViolationKind, region: Option<usize>, message: impl Into<String>) {
        self.violations.push(Violation { kind, region, message: message.into() });
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::InvalidLayout(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        for (k, v) in self.violations.iter().enumerate() {
            if k > 0 {
                write!(f, "; ")?;
            }
            match v.region {
                Some(i) => write!(f, "region {i}: {}", v.message)?,
                None => write!(f, "{}", v.message)?,
            }
        }
        Ok(())
    }
}

pub fn validate_layout(layout: &Layout) -> ValidationReport {
    let mut report = ValidationReport::default();
    if layout.canvas_exponent < 2 || layout.canvas_exponent > 10 {
        report.push(
            ViolationKind::CanvasExponent,
            None,
            format!("canvas exponent {} outside 2..=10", layout.canvas_exponent),
        );
        return report;
    }
    if layout.admissible.max_level() != layout.canvas_exponent {
        report.push(
            ViolationKind::AdmissibleLevels,
            None,
            format!(
                "admissible levels top out at {} but the canvas exponent is {}",
                layout.admissible.max_level(),
                layout.canvas_exponent
            ),
        );
    }
    let side = layout.side();
    for (i, r) in layout.regions.iter().enumerate() {
        if r.mask.side() != side {
            report.push(
                ViolationKind::MaskSize,
                Some(i),
                format!("mask size {0}x{0} does not match canvas {1}x{1}", r.mask.side(), side),
            );
        }
        if !layout.admissible.contains(r.precision) {
            report.push(
                ViolationKind::PrecisionLevel,
                Some(i),
                format!("precision level {} not in admissible set {:?}", r.precision, Vec::<u32>::from(layout.admissible.clone())),
            );
        }
        if r.text.trim().is_empty() {
            report.push(ViolationKind::EmptyText, Some(i), "empty text");
        }
        if !(r.weight > 0.0 && r.weight.is_finite()) {
            report.push(ViolationKind::NonPositiveWeight, Some(i), format!("weight {} must be positive", r.weight));
        }
    }
    report
}

/// Per-level gated masks. `levels[l][i]` is region `i` at side `2^l`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPyramid {
    canvas_exponent: u32,
    levels: Vec<Vec<BinaryMask>>,
}

impl MaskPyramid {
    pub fn canvas_exponent(&self) -> u32 {
        self.canvas_exponent
    }

    pub fn num_regions(&self) -> usize {
        self.levels[0].len()
    }

    pub fn level(&self, l: u32) -> &[BinaryMask] {
        &self.levels[l as usize]
    }

    pub fn mask(&self, l: u32, region: usize) -> &BinaryMask {
        &self.levels[l as usize][region]
    }
}

fn gated_level_mask(region: &Region, level: u32) -> Result<BinaryMask> {
    let side = 1usize << level;
    if level == 0 || region.precision.0 < level {
        Ok(BinaryMask::zeros(side))
    } else {
        resize_binarize(&region.mask, side)
    }
}

pub fn build_mask_pyramid(layout: &Layout) -> Result<MaskPyramid> {
    validate_layout(layout).into_result()?;
    let levels = (0..=layout.canvas_exponent)
        .map(|l| layout.regions.iter().map(|r| gated_level_mask(r, l)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskPyramid { canvas_exponent: layout.canvas_exponent, levels })
}

/// Raise region `index` to `new_level`, touching only the levels that gain a
/// mask. Lowering the level falls back to a full rebuild.
pub fn raise_precision(
    layout: &Layout,
    pyramid: &MaskPyramid,
    index: usize,
    new_level: PrecisionLevel,
) -> Result<(Layout, MaskPyramid)> {
    let region = layout
        .regions
        .get(index)
        .ok_or_else(|| Error::invalid(format!("region index {index} out of range")))?;
    if !layout.admissible.contains(new_level) {
        return Err(Error::invalid(format!("precision level {new_level} is not admissible")));
    }
    let old = region.precision;
    let mut updated = layout.clone();
    updated.regions[index].precision = new_level;
    if new_level < old || pyramid.canvas_exponent != layout.canvas_exponent || pyramid.num_regions() != layout.regions.len() {
        let rebuilt = build_mask_pyramid(&updated)?;
        return Ok((updated, rebuilt));
    }
    let mut next = pyramid.clone();
    for l in (old.0 + 1).max(1)..=new_level.0 {
        next.levels[l as usize][index] = gated_level_mask(&updated.regions[index], l)?;
    }
    Ok((updated, next))
}
