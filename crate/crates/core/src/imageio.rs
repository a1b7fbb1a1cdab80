//! Lossless RGB PNG encoding of `[-1, 1]` image tensors.

use std::path::Path;

use crate::diffusion::Tensor;
use crate::error::{Error, Result};
use crate::scene::{channel_to_unit, unit_to_channel};

pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::invalid(format!("expected an RGB image, got {} channels", image.channels())));
    }
    let (h, w, plane) = (image.height(), image.width(), image.plane());
    let mut rgb = Vec::with_capacity(plane * 3);
    for p in 0..plane {
        for k in 0..3 {
            rgb.push(unit_to_channel(image.data()[k * plane + p]));
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        writer.write_image_data(&rgb).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes 8-bit RGB, RGBA, gray or gray-alpha PNGs; alpha is ignored.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| Error::Format(format!("png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("png: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format("png: only 8-bit images are supported".into()));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(Error::Format(format!("png: unsupported color type {other:?}"))),
    };
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        let px = &buf[p * stride..p * stride + stride];
        for k in 0..3 {
            let v = if stride >= 3 { px[k] } else { px[0] };
            data[k * plane + p] = channel_to_unit(v);
        }
    }
    Ok(Tensor::from_vec(3, h, w, data))
}

pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_png(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    decode_png(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
