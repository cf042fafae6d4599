//! Depth and image file formats.
//!
//! Depth is stored either as a 16-bit grayscale PNG in millimeters (0 = no
//! reading) or in the raw `BSDM` layout: the magic bytes, `u32` height, `u32`
//! width, then `height * width` little-endian `f32` meters in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};

use crate::map::{DepthMap, RgbImage};
use crate::{Error, Result};

pub const RAW_MAGIC: &[u8; 4] = b"BSDM";
const RAW_HEADER_LEN: usize = 12;

pub fn write_raw_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let (h, w) = depth.dim();
    let mut buf = Vec::with_capacity(RAW_HEADER_LEN + 4 * h * w);
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    let valid = depth.valid();
    for ((r, c), &v) in depth.values().indexed_iter() {
        let v = if valid[(r, c)] { v as f32 } else { 0.0 };
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Raw depth values as stored (f32 meters), without validity interpretation.
pub fn read_raw_values(path: &Path) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_raw(&bytes).map_err(|reason| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    })
}

fn parse_raw(bytes: &[u8]) -> std::result::Result<Array2<f32>, String> {
    if bytes.len() < RAW_HEADER_LEN || &bytes[..4] != RAW_MAGIC {
        return Err("missing BSDM header".into());
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[RAW_HEADER_LEN..];
    if body.len() != 4 * h * w {
        return Err(format!(
            "expected {} payload bytes for {h}x{w}, found {}",
            4 * h * w,
            body.len()
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((h, w), data).map_err(|e| e.to_string())
}

pub fn read_raw_depth(path: &Path) -> Result<DepthMap> {
    let raw = read_raw_values(path)?;
    DepthMap::from_sensor(raw.mapv(f64::from))
}

pub fn write_png16_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    let (h, w) = depth.dim();
    let valid = depth.valid();
    let values = depth.values();
    let img = ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
        let (r, c) = (y as usize, x as usize);
        let mm = if valid[(r, c)] {
            (values[(r, c)] * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16
        } else {
            0
        };
        Luma([mm])
    });
    img.save(path)?;
    Ok(())
}

/// 16-bit PNG in millimeters; zero marks a missing reading.
pub fn read_png16_depth(path: &Path) -> Result<DepthMap> {
    let img = image::open(path)?;
    let gray = match img {
        image::DynamicImage::ImageLuma16(g) => g,
        other => {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                reason: format!("expected 16-bit grayscale PNG, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = gray.dimensions();
    let values = Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        gray.get_pixel(c as u32, r as u32)[0] as f64 / 1000.0
    });
    DepthMap::from_sensor(values)
}

/// Reads either depth format, dispatching on the `BSDM` magic.
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let mut head = [0u8; 4];
    {
        use std::io::Read;
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let n = f.read(&mut head).map_err(|e| Error::io(path, e))?;
        if n < 4 {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                reason: "file too short".into(),
            });
        }
    }
    if &head == RAW_MAGIC {
        read_raw_depth(path)
    } else {
        read_png16_depth(path)
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let img = image::open(path)?.to_rgb32f();
    let (w, h) = img.dimensions();
    let values = Array3::from_shape_fn((3, h as usize, w as usize), |(c, r, x)| {
        (img.get_pixel(x as u32, r as u32)[c] as f64).clamp(0.0, 1.0)
    });
    RgbImage::new(values)
}

pub fn write_rgb(path: &Path, image: &RgbImage) -> Result<()> {
    let v = image.values();
    let (h, w) = (image.height(), image.width());
    let img = ImageBuffer::<Rgb<u8>, Vec<u8>>::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (v[(c, y as usize, x as usize)] * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    img.save(path)?;
    Ok(())
}

/// Writes an 8-bit RGB buffer laid out row-major as `[r, g, b]` triples.
pub fn write_rgb8(path: &Path, width: usize, height: usize, pixels: Vec<u8>) -> Result<()> {
    let img = ImageBuffer::<Rgb<u8>, Vec<u8>>::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| Error::InvalidImage("pixel buffer does not match dimensions".into()))?;
    img.save(path)?;
    Ok(())
}

/// Binary mask as an 8-bit grayscale PNG (255 = set).
pub fn write_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let img = ImageBuffer::<Luma<u8>, Vec<u8>>::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[(y as usize, x as usize)] { 255 } else { 0 }])
    });
    img.save(path)?;
    Ok(())
}
