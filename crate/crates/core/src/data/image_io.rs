//! Binary portable graymap / pixmap reading and writing.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::imageops::{self, FilterType};
use image::{ExtendedColorType, ImageBuffer, ImageEncoder, Luma};

use crate::error::{Error, Result};

/// Planar image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `[C, H, W]` row-major.
    pub data: Vec<f32>,
}

/// Reads a PGM/PPM file as `channels` planes (1 = luminance, 3 = RGB).
pub fn read_image(path: &Path, channels: usize) -> Result<Planes> {
    let img = image::open(path).map_err(|e| Error::ingest(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match channels {
        1 => img.to_luma32f().into_raw(),
        3 => {
            let rgb = img.to_rgb32f().into_raw();
            let mut planar = vec![0.0; rgb.len()];
            for (i, px) in rgb.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    planar[c * h * w + i] = px[c];
                }
            }
            planar
        }
        n => return Err(Error::config(format!("unsupported channel count {n}"))),
    };
    Ok(Planes {
        channels,
        height: h,
        width: w,
        data,
    })
}

/// Reads an 8-bit graymap as raw bytes. Returns `(height, width, bytes)`.
pub fn read_gray8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::ingest(path, e))?;
    let g = img.to_luma8();
    Ok((g.height() as usize, g.width() as usize, g.into_raw()))
}

/// Writes an 8-bit binary graymap.
pub fn write_gray8(path: &Path, height: usize, width: usize, bytes: &[u8]) -> Result<()> {
    assert_eq!(bytes.len(), height * width, "pixel count mismatch");
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(bytes, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Io {
            path: path.into(),
            source: std::io::Error::other(e),
        })
}

/// Quantizes `[0, 1]` values to bytes.
pub fn to_bytes(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Bilinear resize of one plane.
pub fn resize_plane(data: &[f32], height: usize, width: usize, new_h: usize, new_w: usize) -> Vec<f32> {
    if (height, width) == (new_h, new_w) {
        return data.to_vec();
    }
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(width as u32, height as u32, data.to_vec()).expect("plane size");
    imageops::resize(&buf, new_w as u32, new_h as u32, FilterType::Triangle).into_raw()
}
