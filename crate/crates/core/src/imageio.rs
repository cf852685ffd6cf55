//! PNG and raw float image files.
//!
//! PNG pixels map to `[0, 1]`; writing clamps to that range and quantizes to
//! 16 bits. The `.rawf` format stores exact values: the magic `LRF1`, then
//! height, width and channels as little-endian `u32`, then the samples as
//! little-endian `f64` in row-major HWC order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const RAWF_MAGIC: &[u8; 4] = b"LRF1";

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Reads an 8- or 16-bit PNG. Gray images give one channel; alpha is dropped.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path).map_err(Error::io_at(path))?));
    decoder.set_transformations(Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let (src_c, keep) = match info.color_type {
        ColorType::Grayscale => (1, 1),
        ColorType::GrayscaleAlpha => (2, 1),
        ColorType::Rgb => (3, 3),
        ColorType::Rgba => (4, 3),
        ColorType::Indexed => return Err(png_err(path, "indexed colour was not expanded")),
    };
    let samples: Vec<Real> = match info.bit_depth {
        BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as Real / 65535.0)
            .collect(),
        BitDepth::Eight => buf[..info.buffer_size()].iter().map(|&b| b as Real / 255.0).collect(),
        d => return Err(png_err(path, format!("unsupported bit depth {d:?}"))),
    };
    let data = samples
        .chunks_exact(src_c)
        .flat_map(|p| p[..keep].iter().copied())
        .collect();
    Tensor::new(vec![h, w, keep], data)
}

fn quantize16(v: Real) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes a 1- or 3-channel image as a 16-bit PNG.
pub fn write_png16(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w, c) = image.hwc()?;
    let color = match c {
        1 => ColorType::Grayscale,
        3 => ColorType::Rgb,
        _ => return Err(Error::shape(format!("PNG output needs 1 or 3 channels, got {c}"))),
    };
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path).map_err(Error::io_at(path))?), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(BitDepth::Sixteen);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    let bytes: Vec<u8> = image.data().iter().flat_map(|&v| quantize16(v).to_be_bytes()).collect();
    writer.write_image_data(&bytes).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))?;
    Ok(())
}

/// Scales an image so its maximum is one, for viewing.
pub fn exposure_normalize(image: &Tensor) -> Tensor {
    let m = image.max_value();
    if m > 0.0 {
        image.scale(1.0 / m)
    } else {
        image.clone()
    }
}

pub fn encode_rawf(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = image.hwc()?;
    let mut out = Vec::with_capacity(16 + image.len() * 8);
    out.extend_from_slice(RAWF_MAGIC);
    for d in [h, w, c] {
        let d = u32::try_from(d).map_err(|_| Error::shape("image extent exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in image.data() {
        out.extend_from_slice(&(v as f64).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_rawf(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 16 || &bytes[..4] != RAWF_MAGIC {
        return Err(Error::Format("not a rawf image".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::Format("rawf extents overflow".into()))?;
    let payload = &bytes[16..];
    if payload.len() != n * 8 {
        return Err(Error::Format(format!("rawf payload holds {} bytes, {h}x{w}x{c} needs {}", payload.len(), n * 8)));
    }
    let data = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()) as Real)
        .collect();
    Tensor::new(vec![h, w, c], data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_rawf(path: &Path, image: &Tensor) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).map_err(Error::io_at(path))?);
    f.write_all(&encode_rawf(image)?).and_then(|_| f.flush()).map_err(Error::io_at(path))?;
    Ok(())
}

pub fn read_rawf(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(Error::io_at(path))?;
    decode_rawf(&bytes)
}

/// Reads `.rawf` files exactly and anything else as PNG.
pub fn read_image(path: &Path) -> Result<Tensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("rawf") => read_rawf(path),
        _ => read_png(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rawf_roundtrip_is_exact() {
        let img = Tensor::from_hwc_fn(3, 5, 2, |y, x, c| (y as Real + 0.1) / (x as Real + 7.0) - c as Real);
        let back = decode_rawf(&encode_rawf(&img).unwrap()).unwrap();
        assert_eq!(back, img);
        assert!(decode_rawf(b"LRF1\x01\0\0\0\x01\0\0\0\x01\0\0\0").is_err());
    }

    #[test]
    fn png16_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Tensor::from_hwc_fn(4, 6, 3, |y, x, c| ((y * 6 + x) * 3 + c) as Real / 72.0);
        write_png16(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(back.max_abs_diff(&img).unwrap() <= 0.5 / 65535.0 + 1e-12);
    }
}
