//! Dense 2-D motion fields, the `.flo` interchange format and color rendering.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::{Rgb, RgbImage};

use crate::error::{config_err, Error, Result};
use crate::tensor::{Shape, Tensor};

pub const FLO_TAG: f32 = 202021.25;

/// Per-pixel `(u, v)` displacement in pixels, stored as a `1 x 2 x H x W` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(Tensor);

impl FlowField {
    pub fn new(t: Tensor) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 2 {
            return Err(config_err!("flow field must be 1x2xHxW, got {s}"));
        }
        Ok(FlowField(t))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField(Tensor::zeros(Shape::new(1, 2, height, width)))
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Self {
        FlowField(Tensor::from_fn(Shape::new(1, 2, height, width), |_, c, _, _| {
            if c == 0 {
                u
            } else {
                v
            }
        }))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f32, f32)) -> Self {
        let mut t = Tensor::zeros(Shape::new(1, 2, height, width));
        let plane = height * width;
        for y in 0..height {
            for x in 0..width {
                let (u, v) = f(y, x);
                t.data_mut()[y * width + x] = u;
                t.data_mut()[plane + y * width + x] = v;
            }
        }
        FlowField(t)
    }

    pub fn height(&self) -> usize {
        self.0.shape().h
    }

    pub fn width(&self) -> usize {
        self.0.shape().w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> (f32, f32) {
        let plane = self.height() * self.width();
        let i = y * self.width() + x;
        (self.0.data()[i], self.0.data()[plane + i])
    }

    pub fn u(&self) -> &[f32] {
        &self.0.data()[..self.height() * self.width()]
    }

    pub fn v(&self) -> &[f32] {
        &self.0.data()[self.height() * self.width()..]
    }

    pub fn magnitudes(&self) -> Vec<f32> {
        self.u().iter().zip(self.v()).map(|(u, v)| u.hypot(*v)).collect()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }
}

pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if !flow.is_finite() {
        return Err(Error::NonFinite { op: "write_flo" });
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_f32::<LittleEndian>(FLO_TAG).map_err(io)?;
    w.write_i32::<LittleEndian>(flow.width() as i32).map_err(io)?;
    w.write_i32::<LittleEndian>(flow.height() as i32).map_err(io)?;
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            let (u, v) = flow.get(y, x);
            w.write_f32::<LittleEndian>(u).map_err(io)?;
            w.write_f32::<LittleEndian>(v).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let truncated = |offset: u64| Error::Format {
        offset,
        detail: "unexpected end of file".into(),
    };
    let tag = r.read_f32::<LittleEndian>().map_err(|_| truncated(0))?;
    if tag != FLO_TAG {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad tag {tag}, expected {FLO_TAG}"),
        });
    }
    let width = r.read_i32::<LittleEndian>().map_err(|_| truncated(4))?;
    let height = r.read_i32::<LittleEndian>().map_err(|_| truncated(8))?;
    if width <= 0 || height <= 0 || width > 1 << 15 || height > 1 << 15 {
        return Err(Error::Format {
            offset: 4,
            detail: format!("implausible dimensions {width}x{height}"),
        });
    }
    let (w, h) = (width as usize, height as usize);
    let mut raw = vec![0f32; 2 * w * h];
    r.read_f32_into::<LittleEndian>(&mut raw).map_err(|_| truncated(12))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Format {
            offset: 12 + 8 * (w * h) as u64,
            detail: "trailing bytes after flow payload".into(),
        });
    }
    Ok(FlowField::from_fn(h, w, |y, x| {
        let i = 2 * (y * w + x);
        (raw[i], raw[i + 1])
    }))
}

/// Hue encodes direction, saturation encodes magnitude relative to `max_mag`
/// (99th percentile of magnitudes when absent); zero motion is white.
pub fn flow_to_color(flow: &FlowField, max_mag: Option<f32>) -> RgbImage {
    let mags = flow.magnitudes();
    let max_mag = max_mag.unwrap_or_else(|| percentile(&mags, 0.99));
    let max_mag = if max_mag > 0.0 && max_mag.is_finite() { max_mag } else { 1.0 };
    let mut img = RgbImage::new(flow.width() as u32, flow.height() as u32);
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            let (u, v) = flow.get(y, x);
            let sat = (mags[y * flow.width() + x] / max_mag).min(1.0);
            let hue = v.atan2(u).to_degrees().rem_euclid(360.0);
            img.put_pixel(x as u32, y as u32, hsv_to_rgb(hue, sat));
        }
    }
    img
}

fn percentile(values: &[f32], q: f32) -> f32 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let idx = ((sorted.len() - 1) as f32 * q).round() as usize;
    sorted[idx]
}

/// Value fixed at 1.
fn hsv_to_rgb(hue: f32, sat: f32) -> Rgb<u8> {
    let c = sat;
    let hp = hue / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = 1.0 - c;
    let q = |v: f32| ((v + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    Rgb([q(r), q(g), q(b)])
}
