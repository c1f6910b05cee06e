//! Image files: 8-bit PNG for people, a flat `f64` binary for exact roundtrips.
//!
//! Binary layout: `DOFI`, then width, height and channel count as `u32`
//! little-endian, then `width * height * channels` little-endian `f64`
//! values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::Image;

const MAGIC: &[u8; 4] = b"DOFI";
const HEADER_LEN: usize = 16;

pub fn write_png(image: &Image, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| Error::parse(path, "header", e))?;
    writer
        .write_image_data(&image.to_rgb8())
        .map_err(|e| Error::parse(path, "data", e))?;
    writer.finish().map_err(|e| Error::parse(path, "data", e))
}

/// Reads an 8-bit RGB or RGBA PNG (alpha is dropped).
pub fn read_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| Error::parse(path, "header", e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::parse(path, "header", "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::parse(path, "data", e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::parse(
            path,
            "bit depth",
            format!("expected 8 bits, got {:?}", info.bit_depth),
        ));
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::parse(path, "color type", format!("expected RGB, got {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let rgb: Vec<u8> = buf[..w * h * channels]
        .chunks_exact(channels)
        .flat_map(|p| [p[0], p[1], p[2]])
        .collect();
    Image::from_rgb8(w, h, &rgb)
}

pub fn encode_binary(image: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + image.data.len() * 24);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(image.width as u32).to_le_bytes());
    out.extend_from_slice(&(image.height as u32).to_le_bytes());
    out.extend_from_slice(&3u32.to_le_bytes());
    for v in image.data.iter().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes [`encode_binary`] output; `path` only labels errors.
pub fn decode_binary(bytes: &[u8], path: &Path) -> Result<Image> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::parse(
            path,
            "header",
            format!("truncated: {} bytes", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::parse(path, "magic", "not a DOFI image"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (w, h, channels) = (word(4), word(8), word(12));
    if channels != 3 {
        return Err(Error::parse(path, "channels", format!("expected 3, got {channels}")));
    }
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(24))
        .ok_or_else(|| Error::parse(path, "header", "dimensions overflow"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(Error::parse(
            path,
            "data",
            format!("expected {expected} bytes for {w}x{h}, found {}", body.len()),
        ));
    }
    let data = body
        .chunks_exact(24)
        .map(|px| std::array::from_fn(|c| f64::from_le_bytes(px[c * 8..c * 8 + 8].try_into().unwrap())))
        .collect();
    Image::from_data(w, h, data)
}

pub fn write_binary(image: &Image, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_binary(image)).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_binary(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_binary(&bytes, path)
}
