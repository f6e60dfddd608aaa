//! Image file I/O. sRGB gamma is applied and removed here — everywhere else
//! the pipeline works in linear light.
//!
//! - Images: 8-bit and 16-bit PNG (writes default to 16-bit).
//! - Masks: single-channel PNG with 0/255 semantics mapped to 0/1.
//! - Normals: 3-channel float EXR holding camera-space vectors in [-1, 1].

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3};

use crate::error::{validation, Error, Result};
use crate::imaging::{BinaryMask, ImagePlane};
use crate::sh::NormalMap;

pub fn srgb_to_linear(s: f64) -> f64 {
    if s <= 0.04045 {
        s / 12.92
    } else {
        ((s + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(l: f64) -> f64 {
    let l = l.clamp(0.0, 1.0);
    if l <= 0.003_130_8 {
        12.92 * l
    } else {
        1.055 * l.powf(1.0 / 2.4) - 0.055
    }
}

/// Read an 8- or 16-bit PNG into a linear-light image plane. Grayscale
/// files come back single-channel, everything else 3-channel.
pub fn read_image_png(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = match img {
        DynamicImage::ImageLuma8(buf) => {
            let mut d = Array3::zeros((1, h, w));
            for (x, y, p) in buf.enumerate_pixels() {
                d[[0, y as usize, x as usize]] = srgb_to_linear(p.0[0] as f64 / 255.0);
            }
            d
        }
        DynamicImage::ImageLuma16(buf) => {
            let mut d = Array3::zeros((1, h, w));
            for (x, y, p) in buf.enumerate_pixels() {
                d[[0, y as usize, x as usize]] = srgb_to_linear(p.0[0] as f64 / 65535.0);
            }
            d
        }
        DynamicImage::ImageRgb16(buf) => {
            let mut d = Array3::zeros((3, h, w));
            for (x, y, p) in buf.enumerate_pixels() {
                for c in 0..3 {
                    d[[c, y as usize, x as usize]] = srgb_to_linear(p.0[c] as f64 / 65535.0);
                }
            }
            d
        }
        other => {
            let buf = other.to_rgb8();
            let mut d = Array3::zeros((3, h, w));
            for (x, y, p) in buf.enumerate_pixels() {
                for c in 0..3 {
                    d[[c, y as usize, x as usize]] = srgb_to_linear(p.0[c] as f64 / 255.0);
                }
            }
            d
        }
    };
    ImagePlane::new(plane)
}

/// Write a linear-light image plane as a 16-bit PNG (sRGB encoded).
pub fn write_image_png(path: impl AsRef<Path>, img: &ImagePlane) -> Result<()> {
    write_image_png_depth(path, img, 16)
}

/// Write with explicit bit depth (8 or 16).
pub fn write_image_png_depth(path: impl AsRef<Path>, img: &ImagePlane, bits: u8) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (img.height() as u32, img.width() as u32);
    let dyn_img = match (img.channels(), bits) {
        (1, 8) => DynamicImage::ImageLuma8(ImageBuffer::from_fn(w, h, |x, y| {
            Luma([quant8(img.get(0, y as usize, x as usize))])
        })),
        (1, 16) => DynamicImage::ImageLuma16(ImageBuffer::from_fn(w, h, |x, y| {
            Luma([quant16(img.get(0, y as usize, x as usize))])
        })),
        (3, 8) => DynamicImage::ImageRgb8(ImageBuffer::from_fn(w, h, |x, y| {
            Rgb([
                quant8(img.get(0, y as usize, x as usize)),
                quant8(img.get(1, y as usize, x as usize)),
                quant8(img.get(2, y as usize, x as usize)),
            ])
        })),
        (3, 16) => DynamicImage::ImageRgb16(ImageBuffer::from_fn(w, h, |x, y| {
            Rgb([
                quant16(img.get(0, y as usize, x as usize)),
                quant16(img.get(1, y as usize, x as usize)),
                quant16(img.get(2, y as usize, x as usize)),
            ])
        })),
        (_, b) => return Err(validation(format!("unsupported PNG bit depth {b}"))),
    };
    dyn_img.save(path).map_err(|e| Error::image(path, e))
}

fn quant8(v: f64) -> u8 {
    (linear_to_srgb(v) * 255.0).round().clamp(0.0, 255.0) as u8
}

fn quant16(v: f64) -> u16 {
    (linear_to_srgb(v) * 65535.0).round().clamp(0.0, 65535.0) as u16
}

/// Read a mask PNG. Values at or above half intensity map to 1.
pub fn read_mask_png(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let buf = img.to_luma8();
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut d = Array2::zeros((h, w));
    for (x, y, p) in buf.enumerate_pixels() {
        d[[y as usize, x as usize]] = if p.0[0] >= 128 { 1u8 } else { 0u8 };
    }
    BinaryMask::new(d)
}

/// Write a mask PNG with 0/255 semantics.
pub fn write_mask_png(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (mask.height() as u32, mask.width() as u32);
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w, h, |x, y| {
        Luma([mask.get(y as usize, x as usize) * 255])
    });
    DynamicImage::ImageLuma8(buf)
        .save(path)
        .map_err(|e| Error::image(path, e))
}

/// Read a normal map from a 3-channel float EXR. Vectors are renormalized
/// to unit length; near-zero vectors are marked invalid.
pub fn read_normals_exr(path: impl AsRef<Path>) -> Result<NormalMap> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let buf = img.to_rgb32f();
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut vectors = Array3::zeros((3, h, w));
    let mut validity = Array2::zeros((h, w));
    for (x, y, p) in buf.enumerate_pixels() {
        let v = [p.0[0] as f64, p.0[1] as f64, p.0[2] as f64];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-3 && norm.is_finite() {
            for c in 0..3 {
                vectors[[c, y as usize, x as usize]] = v[c] / norm;
            }
            validity[[y as usize, x as usize]] = 1u8;
        }
    }
    NormalMap::new(vectors, validity)
}

/// Write a normal map as a 3-channel float EXR. Invalid pixels become zero
/// vectors.
pub fn write_normals_exr(path: impl AsRef<Path>, normals: &NormalMap) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (normals.height() as u32, normals.width() as u32);
    let buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(w, h, |x, y| {
        let (r, c) = (y as usize, x as usize);
        if normals.is_valid(r, c) {
            let n = normals.vector(r, c);
            Rgb([n[0] as f32, n[1] as f32, n[2] as f32])
        } else {
            Rgb([0.0, 0.0, 0.0])
        }
    });
    DynamicImage::ImageRgb32F(buf)
        .save(path)
        .map_err(|e| Error::image(path, e))
}
