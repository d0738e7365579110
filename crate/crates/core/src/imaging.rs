//! Conversions between tensors and 8-bit / 16-bit PNG files.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{config_err, Error, Result};
use crate::tensor::{Shape, Tensor};

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// First batch item of an `N x 3 x H x W` tensor in `[0, 1]`.
pub fn to_rgb(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.c != 3 {
        return Err(config_err!("expected 3 channels for an RGB image, got {s}"));
    }
    Ok(RgbImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([0, 1, 2].map(|c| quantize(t.at(0, c, y, x))))
    }))
}

pub fn from_rgb(img: &RgbImage) -> Tensor {
    let shape = Shape::new(1, 3, img.height() as usize, img.width() as usize);
    Tensor::from_fn(shape, |_, c, y, x| img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0)
}

/// Single-channel map rescaled so its maximum is white.
pub fn to_gray_normalized(values: &[f32], height: usize, width: usize) -> GrayImage {
    let max = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    GrayImage::from_fn(width as u32, height as u32, |x, y| {
        Luma([quantize(values[y as usize * width + x as usize].abs() * scale)])
    })
}

pub fn save_png<P, C>(img: &ImageBuffer<P, C>, path: impl AsRef<Path>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let path = path.as_ref();
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    Ok(img.to_rgb8())
}

pub fn load_gray16(path: impl AsRef<Path>) -> Result<ImageBuffer<Luma<u16>, Vec<u16>>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    Ok(img.to_luma16())
}

pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })?;
    Ok(img.to_luma8())
}
