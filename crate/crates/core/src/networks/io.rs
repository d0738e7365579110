//! Flat binary parameter container.
//!
//! Layout (little-endian): magic `MFNP`, `u32` version, `u8` family,
//! `u32` levels, base channels and max displacement, `f32` slope, `u64` seed,
//! `u32` tensor count, then per tensor: `u32` name length, UTF-8 name,
//! four `u32` dims and the raw `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::{Family, Layer, NetworkParams, NetworkSpec};

const MAGIC: &[u8; 4] = b"MFNP";
const VERSION: u32 = 1;

pub fn write_params(params: &NetworkParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    params.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode(params, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn encode(p: &NetworkParams, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u8(match p.spec.family {
        Family::EncoderDecoder => 0,
        Family::SpatialPyramid => 1,
    })?;
    for v in [p.spec.levels, p.spec.base_channels, p.spec.max_disp] {
        w.write_u32::<LittleEndian>(v as u32)?;
    }
    w.write_f32::<LittleEndian>(p.spec.leaky_slope)?;
    w.write_u64::<LittleEndian>(p.seed)?;
    w.write_u32::<LittleEndian>(2 * p.layers.len() as u32)?;
    for layer in &p.layers {
        for (suffix, t) in [("weight", &layer.kernel), ("bias", &layer.bias)] {
            let name = format!("{}.{suffix}", layer.name);
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            for d in t.shape().dims() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in t.data() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
    }
    Ok(())
}

/// Reads a container and checks it against the architecture its header names.
pub fn read_params(path: impl AsRef<Path>) -> Result<NetworkParams> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Counting {
        inner: BufReader::new(file),
        offset: 0,
    };
    let params = decode(&mut r)?;
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(format_err(r.offset, "trailing bytes after last tensor"));
    }
    params.validate()?;
    Ok(params)
}

struct Counting<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Read for Counting<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.offset += n as u64;
        Ok(n)
    }
}

fn format_err(offset: u64, detail: impl Into<String>) -> Error {
    Error::Format {
        offset,
        detail: detail.into(),
    }
}

fn decode<R: Read>(r: &mut Counting<R>) -> Result<NetworkParams> {
    macro_rules! rd {
        ($e:expr) => {{
            let at = r.offset;
            $e.map_err(|_| format_err(at, "unexpected end of file"))?
        }};
    }
    let mut magic = [0u8; 4];
    rd!(r.read_exact(&mut magic));
    if &magic != MAGIC {
        return Err(format_err(0, format!("bad magic {magic:?}")));
    }
    let version = rd!(r.read_u32::<LittleEndian>());
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let family = match rd!(r.read_u8()) {
        0 => Family::EncoderDecoder,
        1 => Family::SpatialPyramid,
        other => return Err(format_err(8, format!("unknown family code {other}"))),
    };
    let levels = rd!(r.read_u32::<LittleEndian>()) as usize;
    let base_channels = rd!(r.read_u32::<LittleEndian>()) as usize;
    let max_disp = rd!(r.read_u32::<LittleEndian>()) as usize;
    let leaky_slope = rd!(r.read_f32::<LittleEndian>());
    let seed = rd!(r.read_u64::<LittleEndian>());
    let spec = NetworkSpec {
        family,
        levels,
        base_channels,
        max_disp,
        leaky_slope,
    };
    spec.validate()?;
    let count = rd!(r.read_u32::<LittleEndian>()) as usize;
    if count % 2 != 0 {
        return Err(format_err(r.offset - 4, format!("odd tensor count {count}")));
    }
    let mut layers: Vec<Layer> = Vec::with_capacity(count / 2);
    for i in 0..count {
        let at = r.offset;
        let len = rd!(r.read_u32::<LittleEndian>()) as usize;
        if len > 256 {
            return Err(format_err(at, format!("tensor name length {len} is implausible")));
        }
        let mut name = vec![0u8; len];
        rd!(r.read_exact(&mut name));
        let name = String::from_utf8(name).map_err(|_| format_err(at + 4, "tensor name is not UTF-8"))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = rd!(r.read_u32::<LittleEndian>()) as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        if shape.numel() > 1 << 24 {
            return Err(format_err(at, format!("tensor {name} of shape {shape} is implausibly large")));
        }
        let mut data = vec![0f32; shape.numel()];
        rd!(r.read_f32_into::<LittleEndian>(&mut data));
        let tensor = Tensor::new(shape, data)?;
        let (layer, suffix) = name
            .rsplit_once('.')
            .ok_or_else(|| format_err(at, format!("tensor name {name} lacks a suffix")))?;
        match (i % 2, suffix) {
            (0, "weight") => {
                if layers.iter().any(|l| l.name == layer) {
                    return Err(format_err(at, format!("duplicate layer {layer}")));
                }
                layers.push(Layer {
                    name: layer.to_string(),
                    kernel: tensor,
                    bias: Tensor::zeros(Shape::scalar()),
                });
            }
            (1, "bias") if layers.last().is_some_and(|l| l.name == layer) => {
                layers.last_mut().expect("checked").bias = tensor;
            }
            _ => return Err(format_err(at, format!("unexpected tensor {name}"))),
        }
    }
    Ok(NetworkParams { spec, seed, layers })
}
