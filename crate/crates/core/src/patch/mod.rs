//! The adversarial patch, its placement sampler and the paste operator.
//!
//! Image pixels sit at integer coordinates; a transform places the patch
//! centre at `center` and maps patch-local offsets through `scale * R(angle)`.

pub mod homography;

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::imaging;
use crate::tensor::{CompositeMap, Graph, Real, Shape, Tensor, Var};

pub use homography::{correspondence_points, estimate_patch_homography, fit_homography, sample_patch_disparity, PatchMotion};

/// Square-or-rectangular RGB patch with a centred disc mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pixels: Tensor,
    mask: Vec<bool>,
}

fn disc_mask(h: usize, w: usize) -> Vec<bool> {
    let r = h.min(w) as f64 / 2.0;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 - cy, (i % w) as f64 - cx);
            x * x + y * y <= r * r
        })
        .collect()
}

impl Patch {
    /// Wraps `1 x 3 x h x w` pixels, clamping them to `[0, 1]`.
    pub fn new(pixels: Tensor) -> Result<Self> {
        let s = pixels.shape();
        if s.n != 1 || s.c != 3 || s.h == 0 || s.w == 0 {
            return Err(config_err!("patch pixels must be 1x3xhxw, got {s}"));
        }
        if !pixels.is_finite() {
            return Err(config_err!("patch pixels must be finite"));
        }
        let mut p = Patch {
            mask: disc_mask(s.h, s.w),
            pixels,
        };
        p.project();
        Ok(p)
    }

    /// Uniform random pixels in `[0, 1]`.
    pub fn random(h: usize, w: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Patch::new(Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, _, _| rng.random()))
    }

    pub fn height(&self) -> usize {
        self.pixels.shape().h
    }

    pub fn width(&self) -> usize {
        self.pixels.shape().w
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn mask_diameter(&self) -> usize {
        self.height().min(self.width())
    }

    /// Disc radius in patch pixels.
    pub fn radius(&self) -> f64 {
        self.mask_diameter() as f64 / 2.0
    }

    /// Replaces the pixels (same shape) and projects them onto `[0, 1]`.
    pub fn set_pixels(&mut self, pixels: Tensor) -> Result<()> {
        if pixels.shape() != self.pixels.shape() {
            return Err(config_err!("patch update {} does not match {}", pixels.shape(), self.pixels.shape()));
        }
        self.pixels = pixels;
        self.project();
        Ok(())
    }

    fn project(&mut self) {
        for v in self.pixels.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Writes an 8-bit PNG plus a JSON sidecar next to it (`.json` extension).
    ///
    /// The PNG quantizes values to multiples of 1/255.
    pub fn save(&self, png: impl AsRef<Path>, provenance: serde_json::Value) -> Result<()> {
        let png = png.as_ref();
        imaging::save_png(&imaging::to_rgb(&self.pixels)?, png)?;
        let meta = PatchMeta {
            height: self.height(),
            width: self.width(),
            mask_diameter: self.mask_diameter(),
            provenance,
        };
        let side = png.with_extension("json");
        let text = serde_json::to_string_pretty(&meta)?;
        std::fs::write(&side, text + "\n").map_err(|e| Error::io(side, e))
    }

    /// Loads a PNG patch, checking its sidecar when one exists.
    pub fn load(png: impl AsRef<Path>) -> Result<(Self, Option<PatchMeta>)> {
        let png = png.as_ref();
        let patch = Patch::new(imaging::from_rgb(&imaging::load_rgb(png)?))?;
        let side = png.with_extension("json");
        let meta = match std::fs::read_to_string(&side) {
            Ok(text) => {
                let meta: PatchMeta = serde_json::from_str(&text)?;
                if (meta.height, meta.width) != (patch.height(), patch.width()) {
                    return Err(config_err!(
                        "{}: sidecar says {}x{}, image is {}x{}",
                        side.display(),
                        meta.height,
                        meta.width,
                        patch.height(),
                        patch.width()
                    ));
                }
                Some(meta)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(Error::io(side, e)),
        };
        Ok((patch, meta))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchMeta {
    pub height: usize,
    pub width: usize,
    pub mask_diameter: usize,
    /// How the patch was made (mode, targets, steps, seed).
    pub provenance: serde_json::Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformSample {
    pub angle_deg: f64,
    pub scale: f64,
    /// Patch centre `(x, y)` in image pixel coordinates.
    pub center: (f64, f64),
}

impl TransformSample {
    /// Image point of a patch-local offset from the patch centre.
    pub fn forward(&self, lx: f64, ly: f64) -> (f64, f64) {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        (
            self.center.0 + self.scale * (c * lx - s * ly),
            self.center.1 + self.scale * (s * lx + c * ly),
        )
    }

    /// Patch-local offset of an image point.
    pub fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = ((x - self.center.0) / self.scale, (y - self.center.1) / self.scale);
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformRanges {
    pub angle_deg: [f64; 2],
    pub scale: [f64; 2],
}

impl Default for TransformRanges {
    fn default() -> Self {
        TransformRanges {
            angle_deg: [-10.0, 10.0],
            scale: [0.95, 1.05],
        }
    }
}

impl TransformRanges {
    pub fn validate(&self) -> Result<()> {
        let [a0, a1] = self.angle_deg;
        let [s0, s1] = self.scale;
        if !(a0 <= a1 && a0.is_finite() && a1.is_finite()) {
            return Err(config_err!("angle range [{a0}, {a1}] is invalid"));
        }
        if !(0.0 < s0 && s0 <= s1 && s1.is_finite()) {
            return Err(config_err!("scale range [{s0}, {s1}] is invalid"));
        }
        Ok(())
    }
}

/// Range of valid centre coordinates along an image side of `len` pixels
/// for a disc of radius `extent`; the image covers `[-0.5, len - 0.5]`.
fn center_range(len: usize, extent: f64) -> Option<(f64, f64)> {
    let (lo, hi) = (extent - 0.5, len as f64 - 0.5 - extent);
    (lo <= hi + 1e-12).then_some((lo, hi.max(lo)))
}

/// Uniform placement whose scaled disc footprint stays inside the image.
pub fn sample_transform<R: Rng + ?Sized>(
    rng: &mut R,
    image_dims: (usize, usize),
    patch_dims: (usize, usize),
    ranges: &TransformRanges,
) -> Result<TransformSample> {
    ranges.validate()?;
    let (ih, iw) = image_dims;
    let extent = ranges.scale[1] * patch_dims.0.min(patch_dims.1) as f64 / 2.0;
    let (Some((x0, x1)), Some((y0, y1))) = (center_range(iw, extent), center_range(ih, extent)) else {
        return Err(config_err!(
            "patch {}x{} at scale {} does not fit a {ih}x{iw} image",
            patch_dims.0,
            patch_dims.1,
            ranges.scale[1]
        ));
    };
    Ok(TransformSample {
        angle_deg: rng.random_range(ranges.angle_deg[0]..=ranges.angle_deg[1]),
        scale: rng.random_range(ranges.scale[0]..=ranges.scale[1]),
        center: (rng.random_range(x0..=x1), rng.random_range(y0..=y1)),
    })
}

/// Destination pixels of one paste and the patch taps feeding each.
#[derive(Clone, Debug)]
pub struct PasteMap {
    map: Arc<CompositeMap>,
}

impl PasteMap {
    /// Builds the map for `patch` placed by `t` in an `h x w` image.
    pub fn new(patch: &Patch, dims: (usize, usize), t: &TransformSample) -> Result<Self> {
        check_transform(t)?;
        let reach = t.scale * (patch.radius() + 1.0);
        let corners = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)].map(|(a, b)| (t.center.0 + a * reach, t.center.1 + b * reach));
        let footprint_extent = t.scale * patch.radius();
        check_inside(dims, t.center, footprint_extent)?;
        Self::build(patch, dims, &corners, |x, y| t.inverse(x, y))
    }

    /// Builds a map from an arbitrary image-to-patch-local inverse mapping,
    /// scanning the bounding box of `hull`.
    pub(crate) fn build(
        patch: &Patch,
        dims: (usize, usize),
        hull: &[(f64, f64)],
        to_local: impl Fn(f64, f64) -> (f64, f64),
    ) -> Result<Self> {
        let (ih, iw) = dims;
        let (ph, pw) = (patch.height(), patch.width());
        let (pcx, pcy) = ((pw as f64 - 1.0) / 2.0, (ph as f64 - 1.0) / 2.0);
        let xs = hull.iter().map(|p| p.0);
        let ys = hull.iter().map(|p| p.1);
        let clamp = |v: f64, len: usize| v.clamp(0.0, len as f64 - 1.0);
        let x_lo = clamp(xs.clone().fold(f64::INFINITY, f64::min).floor(), iw) as usize;
        let x_hi = clamp(xs.fold(f64::NEG_INFINITY, f64::max).ceil(), iw) as usize;
        let y_lo = clamp(ys.clone().fold(f64::INFINITY, f64::min).floor(), ih) as usize;
        let y_hi = clamp(ys.fold(f64::NEG_INFINITY, f64::max).ceil(), ih) as usize;

        let mask = patch.mask();
        let mut map = CompositeMap::new(dims, (ph, pw));
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let (lx, ly) = to_local(x as f64, y as f64);
                let (px, py) = (lx + pcx, ly + pcy);
                if !(px > -1.0 && py > -1.0 && px < pw as f64 && py < ph as f64) {
                    continue;
                }
                let (jx, jy) = (px.floor(), py.floor());
                let (ax, ay) = (px - jx, py - jy);
                let mut taps = Vec::with_capacity(4);
                let mut coverage = 0.0;
                for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
                    for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
                        let (sx, sy) = (jx as i64 + dx, jy as i64 + dy);
                        let w = wx * wy;
                        if w <= 0.0 || sx < 0 || sy < 0 || sx >= pw as i64 || sy >= ph as i64 {
                            continue;
                        }
                        let s = sy as usize * pw + sx as usize;
                        if mask[s] {
                            coverage += w;
                            taps.push((s, w));
                        }
                    }
                }
                // bilinear mask value; only in-mask taps are ever read
                if coverage >= 0.5 {
                    for tap in &mut taps {
                        tap.1 /= coverage;
                    }
                    map.push(y * iw + x, taps);
                }
            }
        }
        Ok(PasteMap { map: Arc::new(map) })
    }

    /// Pixel indices (`y * w + x`) the paste overwrites.
    pub fn footprint(&self) -> Vec<bool> {
        let (h, w) = self.map.dst_dims;
        let mut out = vec![false; h * w];
        for d in self.map.destinations() {
            out[d] = true;
        }
        out
    }

    pub fn pixel_count(&self) -> usize {
        self.map.len()
    }

    pub fn composite_map(&self) -> &Arc<CompositeMap> {
        &self.map
    }

    /// Pastes `patch` into `img` (`1 x 3 x H x W`).
    pub fn apply(&self, img: &Tensor, patch: &Patch) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let base = g.constant(img.clone())?;
        let src = g.constant(patch.pixels().clone())?;
        let out = self.apply_var(&mut g, base, src)?;
        Ok(g.value(out).clone())
    }

    /// Pastes the image's own pixels over the footprint (a transparent patch).
    pub fn apply_transparent(&self, img: &Tensor) -> Result<Tensor> {
        let dims = self.map.dst_dims;
        let mut own = CompositeMap::new(dims, dims);
        for d in self.map.destinations() {
            own.push(d, [(d, 1.0)]);
        }
        let mut g = Graph::<f32>::new();
        let base = g.constant(img.clone())?;
        let src = g.constant(img.clone())?;
        let out = g.composite(base, src, Arc::new(own))?;
        Ok(g.value(out).clone())
    }

    /// Differentiable paste of a patch variable into an image variable.
    pub fn apply_var<T: Real>(&self, g: &mut Graph<T>, img: Var, patch: Var) -> Result<Var> {
        g.composite(img, patch, Arc::clone(&self.map))
    }
}

fn check_transform(t: &TransformSample) -> Result<()> {
    let ok = t.angle_deg.is_finite() && t.scale.is_finite() && t.scale > 0.0 && t.center.0.is_finite() && t.center.1.is_finite();
    if ok {
        Ok(())
    } else {
        Err(config_err!("invalid transform {t:?}"))
    }
}

fn check_inside(dims: (usize, usize), center: (f64, f64), extent: f64) -> Result<()> {
    let (h, w) = dims;
    let tol = 1e-9;
    let inside = center.0 - extent >= -0.5 - tol
        && center.1 - extent >= -0.5 - tol
        && center.0 + extent <= w as f64 - 0.5 + tol
        && center.1 + extent <= h as f64 - 0.5 + tol;
    if inside {
        Ok(())
    } else {
        Err(Error::Placement(format!(
            "footprint of radius {extent:.2} at ({:.2}, {:.2}) leaves the {h}x{w} image",
            center.0, center.1
        )))
    }
}

/// Pastes `p` into `img` under transform `t`.
pub fn apply_patch(img: &Tensor, p: &Patch, t: &TransformSample) -> Result<Tensor> {
    let s = img.shape();
    PasteMap::new(p, (s.h, s.w), t)?.apply(img, p)
}

/// Paste maps for a patch that moves with the scene: frame 1 under `t1`,
/// frame 2 under `t1` followed by the homography.
pub fn moving_maps(p: &Patch, dims: (usize, usize), t1: &TransformSample, motion: &PatchMotion) -> Result<(PasteMap, PasteMap)> {
    let first = PasteMap::new(p, dims, t1)?;
    let reach = t1.scale * (p.radius() + 1.0);
    let corners: Vec<(f64, f64)> = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)]
        .iter()
        .map(|&(a, b)| motion.apply(t1.center.0 + a * reach, t1.center.1 + b * reach))
        .collect();
    let rim = t1.scale * p.radius();
    let mut rim_pts = Vec::with_capacity(32);
    for k in 0..32 {
        let th = k as f64 * std::f64::consts::TAU / 32.0;
        rim_pts.push(motion.apply(t1.center.0 + rim * th.cos(), t1.center.1 + rim * th.sin()));
    }
    let (h, w) = dims;
    if rim_pts
        .iter()
        .any(|&(x, y)| !(x >= -0.5 && y >= -0.5 && x <= w as f64 - 0.5 && y <= h as f64 - 0.5))
    {
        return Err(Error::Placement("moved patch footprint leaves the second frame".into()));
    }
    let inv = motion.inverse()?;
    let second = PasteMap::build(p, dims, &corners, |x, y| {
        let (x1, y1) = inv.apply(x, y);
        t1.inverse(x1, y1)
    })?;
    Ok((first, second))
}

/// Frame 1 gets the static paste; frame 2 the homography-warped patch.
pub fn apply_patch_pair_moving(
    i1: &Tensor,
    i2: &Tensor,
    p: &Patch,
    t1: &TransformSample,
    motion: &PatchMotion,
) -> Result<(Tensor, Tensor)> {
    let s = i1.shape();
    if i2.shape() != s {
        return Err(config_err!("frame shapes {} and {} differ", s, i2.shape()));
    }
    let (m1, m2) = moving_maps(p, (s.h, s.w), t1, motion)?;
    Ok((m1.apply(i1, p)?, m2.apply(i2, p)?))
}

#[cfg(test)]
mod tests;
