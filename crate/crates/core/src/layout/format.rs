//! Layout file format (JSON). See `docs/formats.md` for the field list.
//!
//! Masks are stored either inline as run-length-encoded bit strings or as
//! references to 1-bit grayscale PNG files relative to the document.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdmissibleLevels, BinaryMask, Layout, PrecisionLevel, Region};
use crate::error::{Error, Result};

pub const FORMAT_NAME: &str = "anylevel-layout";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutDocument {
    #[serde(default = "format_name")]
    pub format: String,
    #[serde(default = "format_version")]
    pub version: u32,
    pub canvas_exponent: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub admissible_levels: Option<AdmissibleLevels>,
    #[serde(default)]
    pub regions: Vec<RegionDocument>,
}

fn format_name() -> String {
    FORMAT_NAME.to_string()
}

fn format_version() -> u32 {
    FORMAT_VERSION
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionDocument {
    pub text: String,
    pub precision: u32,
    #[serde(default = "one")]
    pub weight: f64,
    pub mask: MaskDocument,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskDocument {
    /// Alternating run lengths over the row-major bits, starting with a run
    /// of zeros (possibly empty).
    Rle(String),
    /// Path to a 1-bit grayscale PNG, relative to the layout document.
    File(String),
}

pub fn encode_rle(mask: &BinaryMask) -> String {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0usize;
    for &b in mask.bits() {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    runs.push(len);
    runs.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn decode_rle(text: &str) -> Result<BinaryMask> {
    let mut bits = Vec::new();
    let mut value = false;
    for tok in text.split_whitespace() {
        let n: usize = tok.parse().map_err(|_| Error::Format(format!("bad run length `{tok}`")))?;
        if bits.len() + n > 1 << 24 {
            return Err(Error::Format("run-length mask too large".into()));
        }
        bits.extend(std::iter::repeat(value).take(n));
        value = !value;
    }
    let side = (bits.len() as f64).sqrt().round() as usize;
    if side * side != bits.len() || side == 0 {
        return Err(Error::Format(format!("run-length mask holds {} bits, not a square", bits.len())));
    }
    BinaryMask::from_bits(side, bits)
}

impl LayoutDocument {
    pub fn from_layout(layout: &Layout) -> Self {
        Self {
            format: format_name(),
            version: FORMAT_VERSION,
            canvas_exponent: layout.canvas_exponent,
            admissible_levels: Some(layout.admissible.clone()),
            regions: layout
                .regions
                .iter()
                .map(|r| RegionDocument {
                    text: r.text.clone(),
                    precision: r.precision.0,
                    weight: r.weight,
                    mask: MaskDocument::Rle(encode_rle(&r.mask)),
                })
                .collect(),
        }
    }

    /// Resolve into a [`Layout`]. File mask references are read relative to
    /// `base_dir`; without one they are rejected.
    pub fn into_layout(self, base_dir: Option<&Path>) -> Result<Layout> {
        if self.format != FORMAT_NAME {
            return Err(Error::Format(format!("unexpected format `{}`", self.format)));
        }
        if self.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported layout version {}", self.version)));
        }
        let admissible = self
            .admissible_levels
            .unwrap_or_else(|| AdmissibleLevels::default_for(self.canvas_exponent));
        let regions = self
            .regions
            .into_iter()
            .map(|r| {
                let mask = match &r.mask {
                    MaskDocument::Rle(s) => decode_rle(s)?,
                    MaskDocument::File(p) => {
                        let base = base_dir.ok_or_else(|| {
                            Error::Format(format!("mask file `{p}` referenced from an inline document"))
                        })?;
                        read_mask_png(&base.join(p))?
                    }
                };
                Ok(Region { mask, text: r.text, precision: PrecisionLevel(r.precision), weight: r.weight })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Layout { canvas_exponent: self.canvas_exponent, admissible, regions })
    }
}

pub fn to_json(layout: &Layout) -> String {
    serde_json::to_string_pretty(&LayoutDocument::from_layout(layout)).expect("layout documents always serialize")
}

pub fn from_json(text: &str) -> Result<Layout> {
    let doc: LayoutDocument = serde_json::from_str(text)?;
    doc.into_layout(None)
}

pub fn read_layout(path: &Path) -> Result<Layout> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: LayoutDocument = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    doc.into_layout(path.parent())
}

/// Write `layout` with inline masks.
pub fn write_layout(path: &Path, layout: &Layout) -> Result<()> {
    std::fs::write(path, to_json(layout)).map_err(|e| Error::io(path, e))
}

/// Write `layout` with each mask as a separate PNG next to the document,
/// named `<stem>.region<i>.png`.
pub fn write_layout_with_mask_files(path: &Path, layout: &Layout) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("layout");
    let mut doc = LayoutDocument::from_layout(layout);
    for (i, (rd, r)) in doc.regions.iter_mut().zip(&layout.regions).enumerate() {
        let name = format!("{stem}.region{i}.png");
        write_mask_png(&dir.join(&name), &r.mask)?;
        rd.mask = MaskDocument::File(name);
    }
    let text = serde_json::to_string_pretty(&doc)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let side = mask.side() as u32;
    let mut enc = png::Encoder::new(BufWriter::new(file), side, side);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let stride = mask.side().div_ceil(8);
    let mut data = vec![0u8; stride * mask.side()];
    for (k, &b) in mask.bits().iter().enumerate() {
        if b {
            let (y, x) = (k / mask.side(), k % mask.side());
            data[y * stride + x / 8] |= 0x80 >> (x % 8);
        }
    }
    let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    writer.write_image_data(&data).map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// Read a grayscale PNG as a mask. Any non-zero sample is a set bit, so 8-bit
/// masks load as well as 1-bit ones.
pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if info.width != info.height {
        return Err(Error::Format(format!("{}: mask must be square", path.display())));
    }
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::Format(format!("{}: mask must be grayscale", path.display())));
    }
    let side = info.width as usize;
    let bytes_per_sample = if info.bit_depth == png::BitDepth::Sixteen { 2 } else { 1 };
    let bits = (0..side * side)
        .map(|k| {
            let (y, x) = (k / side, k % side);
            let off = y * info.line_size + x * bytes_per_sample;
            buf[off..off + bytes_per_sample].iter().any(|&v| v != 0)
        })
        .collect();
    BinaryMask::from_bits(side, bits)
}
