//! Image persistence: 8-bit grayscale PNG and the raw float grid format.
//!
//! Raw layout (little-endian): `b"FGRID\0"`, `u16` version, `u32` height,
//! `u32` width, then `height * width` `f32` pixels in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};

pub const FGRID_MAGIC: &[u8; 6] = b"FGRID\0";
pub const FGRID_VERSION: u16 = 1;
pub const FGRID_HEADER_LEN: usize = 16;

pub fn encode_fgrid(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(FGRID_HEADER_LEN + img.pixels().len() * 4);
    out.extend_from_slice(FGRID_MAGIC);
    out.extend_from_slice(&FGRID_VERSION.to_le_bytes());
    out.extend_from_slice(&(img.height() as u32).to_le_bytes());
    out.extend_from_slice(&(img.width() as u32).to_le_bytes());
    for v in img.pixels() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_fgrid(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < FGRID_HEADER_LEN || &bytes[..6] != FGRID_MAGIC {
        return Err(Error::Format("missing FGRID header".into()));
    }
    let version = u16::from_le_bytes([bytes[6], bytes[7]]);
    if version != FGRID_VERSION {
        return Err(Error::Format(format!("unsupported FGRID version {version}")));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[FGRID_HEADER_LEN..];
    if body.len() != h * w * 4 {
        return Err(Error::Format(format!(
            "FGRID body has {} bytes, expected {} for {h}x{w}",
            body.len(),
            h * w * 4
        )));
    }
    let pixels = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Image::new(h, w, pixels)
}

pub fn write_fgrid(img: &Image, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_fgrid(img))?;
    Ok(())
}

pub fn read_fgrid(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_fgrid(&bytes)
}

pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img
        .pixels()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .ok_or_else(|| Error::Format("png buffer size mismatch".into()))?;
    buf.save(path)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Image> {
    let gray = image::open(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    Image::new(
        h as usize,
        w as usize,
        gray.into_raw().into_iter().map(|b| b as f32 / 255.0).collect(),
    )
}

/// Reads by extension: `.png` as PNG, anything else as FGRID.
pub fn read_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("png") => read_png(path),
        _ => read_fgrid(path),
    }
}

pub fn write_image(img: &Image, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("png") => write_png(img, path),
        _ => write_fgrid(img, path),
    }
}
