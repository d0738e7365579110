//! Procedural two-frame scenes with exact ground-truth flow, disparity and pose.
//!
//! Textures are continuous value noise evaluated analytically, so frame 2 is
//! rendered as `B(x - d)` rather than resampled from frame 1 and the ground
//! truth carries no interpolation error.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::flow::{read_flo, write_flo, FlowField};
use crate::imaging;
use crate::tensor::{Shape, Tensor};

/// Largest per-frame motion (px) the scene generator may produce; the
/// miniature networks are trained for this range.
pub const MAX_REPRESENTABLE_MOTION: f32 = 4.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureSpec {
    /// Lattice spacing of the coarsest octave, in pixels.
    pub cell: f32,
    pub octaves: usize,
    /// Amplitude ratio between consecutive octaves.
    pub persistence: f32,
    /// Weight of per-channel noise against the shared luminance layer.
    pub color_mix: f32,
}

impl Default for TextureSpec {
    fn default() -> Self {
        TextureSpec {
            cell: 12.0,
            octaves: 3,
            persistence: 0.6,
            color_mix: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpriteSpec {
    pub count_min: usize,
    pub count_max: usize,
    pub size_min: f32,
    pub size_max: f32,
    /// Upper bound on sprite speed (px per frame).
    pub max_speed: f32,
    /// Sprite disparity as a multiple of the background disparity.
    pub disparity_gain: [f32; 2],
}

impl Default for SpriteSpec {
    fn default() -> Self {
        SpriteSpec {
            count_min: 0,
            count_max: 3,
            size_min: 10.0,
            size_max: 24.0,
            max_speed: 3.0,
            disparity_gain: [1.5, 3.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSpec {
    /// Background shift drawn uniformly in `[-max_shift, max_shift]` per axis.
    pub max_shift: f32,
    /// Overrides the random draw when set.
    pub fixed_shift: Option<[f32; 2]>,
    pub focal: f64,
    pub baseline: f64,
    pub background_disparity: f32,
}

impl Default for CameraSpec {
    fn default() -> Self {
        CameraSpec {
            max_shift: 3.0,
            fixed_shift: None,
            focal: 74.0,
            baseline: 0.54,
            background_disparity: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub texture: TextureSpec,
    pub sprites: SpriteSpec,
    pub camera: CameraSpec,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 128,
            texture: TextureSpec::default(),
            sprites: SpriteSpec::default(),
            camera: CameraSpec::default(),
        }
    }
}

impl SceneConfig {
    /// A scene with no sprites whose background moves by exactly `(dx, dy)`.
    pub fn translation_only(&self, dx: f32, dy: f32) -> SceneConfig {
        let mut cfg = self.clone();
        cfg.sprites.count_min = 0;
        cfg.sprites.count_max = 0;
        cfg.camera.fixed_shift = Some([dx, dy]);
        cfg
    }

    /// A scene with no sprites and a random camera shift per sample.
    pub fn global_translation(&self) -> SceneConfig {
        let mut cfg = self.clone();
        cfg.sprites.count_min = 0;
        cfg.sprites.count_max = 0;
        cfg.camera.fixed_shift = None;
        cfg
    }

    /// A scene in which nothing moves.
    pub fn static_scene(&self) -> SceneConfig {
        let mut cfg = self.translation_only(0.0, 0.0);
        cfg.sprites = self.sprites.clone();
        cfg.sprites.max_speed = 0.0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(config_err!(
                "scene dims {}x{} must be positive multiples of 16",
                self.height,
                self.width
            ));
        }
        let t = &self.texture;
        if !(t.cell >= 1.0) || t.octaves == 0 || !(t.persistence > 0.0) || !(0.0..=1.0).contains(&t.color_mix) {
            return Err(config_err!("invalid texture spec {t:?}"));
        }
        let s = &self.sprites;
        if s.count_min > s.count_max || !(s.size_min > 0.0) || s.size_min > s.size_max {
            return Err(config_err!("invalid sprite spec {s:?}"));
        }
        if !(s.disparity_gain[0] >= 1.0) || s.disparity_gain[0] > s.disparity_gain[1] {
            return Err(config_err!(
                "sprite disparity gain {:?} must be an ordered range starting at 1 or more",
                s.disparity_gain
            ));
        }
        let c = &self.camera;
        let shift = match c.fixed_shift {
            Some([dx, dy]) => dx.hypot(dy),
            None => c.max_shift * std::f32::consts::SQRT_2,
        };
        for (what, v) in [("sprite speed", s.max_speed), ("camera shift", shift)] {
            if !(0.0..=MAX_REPRESENTABLE_MOTION).contains(&v) {
                return Err(config_err!(
                    "{what} {v} exceeds the representable motion {MAX_REPRESENTABLE_MOTION}"
                ));
            }
        }
        if !(c.focal > 0.0) || !(c.baseline > 0.0) || !(c.background_disparity > 0.0) {
            return Err(config_err!("camera focal, baseline and disparity must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline: f64,
}

/// Maps frame-1 camera coordinates to frame-2: `X2 = R X1 + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }
}

#[derive(Clone, Debug)]
pub struct SamplePair {
    pub id: usize,
    pub seed: u64,
    pub i1: Tensor,
    pub i2: Tensor,
    pub gt_flow: FlowField,
    /// `1 x 1 x H x W`, 1 where the ground truth is usable.
    pub valid: Tensor,
    /// `1 x 1 x H x W` frame-1 disparity in pixels.
    pub disparity: Tensor,
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
}

impl SamplePair {
    pub fn height(&self) -> usize {
        self.i1.shape().h
    }

    pub fn width(&self) -> usize {
        self.i1.shape().w
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.valid.data().iter().map(|&v| v > 0.5).collect()
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape2 {
    Disc { radius: f32 },
    Rect { half_w: f32, half_h: f32 },
}

#[derive(Clone, Debug)]
struct Sprite {
    center: (f32, f32),
    velocity: (f32, f32),
    shape: Shape2,
    texture_seed: u64,
    tint: [f32; 3],
    disparity: f32,
}

impl Sprite {
    fn contains(&self, x: f32, y: f32, t: f32) -> bool {
        let dx = x - (self.center.0 + t * self.velocity.0);
        let dy = y - (self.center.1 + t * self.velocity.1);
        match self.shape {
            Shape2::Disc { radius } => dx * dx + dy * dy <= radius * radius,
            Shape2::Rect { half_w, half_h } => dx.abs() <= half_w && dy.abs() <= half_h,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sample `index` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    splitmix(seed ^ splitmix(index as u64 + 1))
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f32 {
    let h = splitmix(seed ^ splitmix((ix as u64).wrapping_mul(0x1000_0000_01B3) ^ (iy as u64).rotate_left(32)));
    (h >> 40) as f32 / (1u64 << 24) as f32
}

fn fade(t: f32) -> f32 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Multi-octave value noise in `[0, 1]`, continuous in `(x, y)`.
fn value_noise(seed: u64, x: f32, y: f32, cell: f32, octaves: usize, persistence: f32) -> f32 {
    let (mut acc, mut norm, mut amp, mut cell) = (0.0, 0.0, 1.0, cell);
    for o in 0..octaves {
        let s = splitmix(seed.wrapping_add(o as u64));
        let (gx, gy) = (x / cell, y / cell);
        let (fx, fy) = (gx.floor(), gy.floor());
        let (ix, iy) = (fx as i64, fy as i64);
        let (tx, ty) = (fade(gx - fx), fade(gy - fy));
        let top = lattice(s, ix, iy) * (1.0 - tx) + lattice(s, ix + 1, iy) * tx;
        let bot = lattice(s, ix, iy + 1) * (1.0 - tx) + lattice(s, ix + 1, iy + 1) * tx;
        acc += amp * (top * (1.0 - ty) + bot * ty);
        norm += amp;
        amp *= persistence;
        cell = (cell * 0.5).max(1.0);
    }
    acc / norm
}

struct Scene {
    cfg: SceneConfig,
    bg_seed: u64,
    shift: (f32, f32),
    sprites: Vec<Sprite>,
}

impl Scene {
    fn sample(cfg: &SceneConfig, seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bg_seed = rng.random::<u64>();
        let shift = match cfg.camera.fixed_shift {
            Some([dx, dy]) => (dx, dy),
            None if cfg.camera.max_shift > 0.0 => {
                let m = cfg.camera.max_shift;
                (rng.random_range(-m..=m), rng.random_range(-m..=m))
            }
            None => (0.0, 0.0),
        };
        let sp = &cfg.sprites;
        let count = rng.random_range(sp.count_min..=sp.count_max);
        let sprites = (0..count)
            .map(|_| {
                let size = rng.random_range(sp.size_min..=sp.size_max);
                let shape = if rng.random_bool(0.5) {
                    Shape2::Disc { radius: size / 2.0 }
                } else {
                    let aspect: f32 = rng.random_range(0.6..=1.4);
                    Shape2::Rect {
                        half_w: size * aspect / 2.0,
                        half_h: size / aspect / 2.0,
                    }
                };
                let center = (
                    rng.random_range(0.0..cfg.width as f32),
                    rng.random_range(0.0..cfg.height as f32),
                );
                let speed = sp.max_speed * rng.random::<f32>().sqrt();
                let angle = rng.random_range(0.0..std::f32::consts::TAU);
                let velocity = (speed * angle.cos(), speed * angle.sin());
                let gain = rng.random_range(sp.disparity_gain[0]..=sp.disparity_gain[1]);
                Sprite {
                    center,
                    velocity,
                    shape,
                    texture_seed: rng.random(),
                    tint: [rng.random(), rng.random(), rng.random()],
                    disparity: cfg.camera.background_disparity * gain,
                }
            })
            .collect();
        Scene {
            cfg: cfg.clone(),
            bg_seed,
            shift,
            sprites,
        }
    }

    /// Index of the topmost sprite covering `(x, y)` at time `t`.
    fn layer(&self, x: f32, y: f32, t: f32) -> Option<usize> {
        self.sprites.iter().rposition(|s| s.contains(x, y, t))
    }

    fn background(&self, x: f32, y: f32) -> [f32; 3] {
        let tx = &self.cfg.texture;
        let lum = value_noise(self.bg_seed, x, y, tx.cell, tx.octaves, tx.persistence);
        [1u64, 2, 3].map(|c| {
            let n = value_noise(self.bg_seed.wrapping_add(c * 7919), x, y, tx.cell, tx.octaves, tx.persistence);
            (1.0 - tx.color_mix) * lum + tx.color_mix * n
        })
    }

    fn sprite_color(&self, k: usize, x: f32, y: f32, t: f32) -> [f32; 3] {
        let s = &self.sprites[k];
        let (lx, ly) = (x - s.center.0 - t * s.velocity.0, y - s.center.1 - t * s.velocity.1);
        let cell = (self.cfg.texture.cell * 0.5).max(2.0);
        let n = value_noise(s.texture_seed, lx, ly, cell, 2, 0.5);
        s.tint.map(|tint| 0.25 + 0.5 * (0.5 * tint + 0.5 * n))
    }

    fn color(&self, x: f32, y: f32, t: f32) -> [f32; 3] {
        match self.layer(x, y, t) {
            Some(k) => self.sprite_color(k, x, y, t),
            None => self.background(x - t * self.shift.0, y - t * self.shift.1),
        }
    }

    fn render(&self, t: f32) -> Tensor {
        let (h, w) = (self.cfg.height, self.cfg.width);
        let mut out = Tensor::zeros(Shape::new(1, 3, h, w));
        let plane = h * w;
        for y in 0..h {
            for x in 0..w {
                let rgb = self.color(x as f32, y as f32, t);
                for (c, v) in rgb.into_iter().enumerate() {
                    out.data_mut()[c * plane + y * w + x] = v;
                }
            }
        }
        out
    }
}

pub fn generate_pair(cfg: &SceneConfig, seed: u64) -> Result<SamplePair> {
    cfg.validate()?;
    let scene = Scene::sample(cfg, seed);
    let (h, w) = (cfg.height, cfg.width);
    let i1 = scene.render(0.0);
    let i2 = scene.render(1.0);

    let mut valid = Tensor::zeros(Shape::new(1, 1, h, w));
    let mut disparity = Tensor::zeros(Shape::new(1, 1, h, w));
    let gt_flow = FlowField::from_fn(h, w, |y, x| {
        let (px, py) = (x as f32, y as f32);
        let layer = scene.layer(px, py, 0.0);
        let (u, v, d) = match layer {
            Some(k) => {
                let s = &scene.sprites[k];
                (s.velocity.0, s.velocity.1, s.disparity)
            }
            None => (scene.shift.0, scene.shift.1, cfg.camera.background_disparity),
        };
        let (qx, qy) = (px + u, py + v);
        let inside = qx >= 0.0 && qy >= 0.0 && qx <= (w - 1) as f32 && qy <= (h - 1) as f32;
        let visible = inside && scene.layer(qx, qy, 1.0) == layer;
        valid.data_mut()[y * w + x] = if visible { 1.0 } else { 0.0 };
        disparity.data_mut()[y * w + x] = d;
        (u, v)
    });

    let cam = &cfg.camera;
    // The background is a fronto-parallel plane; its image motion f*t/Z fixes t.
    let depth_scale = cam.baseline / cam.background_disparity as f64;
    let pose = CameraPose {
        rotation: CameraPose::identity().rotation,
        translation: [scene.shift.0 as f64 * depth_scale, scene.shift.1 as f64 * depth_scale, 0.0],
    };
    Ok(SamplePair {
        id: 0,
        seed,
        i1,
        i2,
        gt_flow,
        valid,
        disparity,
        pose,
        intrinsics: Intrinsics {
            focal: cam.focal,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
            baseline: cam.baseline,
        },
    })
}

/// `count` pairs with per-sample seeds derived from `seed`, generated in parallel.
pub fn generate_dataset(cfg: &SceneConfig, count: usize, seed: u64) -> Result<Vec<SamplePair>> {
    cfg.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut pair = generate_pair(cfg, sample_seed(seed, i))?;
            pair.id = i;
            Ok(pair)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: usize,
    pub seed: u64,
    pub dataset_seed: u64,
    pub frame1: String,
    pub frame2: String,
    pub flow: String,
    pub valid: String,
    pub disparity: String,
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
}

pub const MANIFEST: &str = "manifest.jsonl";
pub const SCENE_SNAPSHOT: &str = "scene.toml";

/// Writes PNG frames, `.flo` ground truth, a validity PNG, a 16-bit disparity
/// PNG (value / 256 px) per pair, plus the manifest and a scene snapshot.
pub fn write_dataset(dir: impl AsRef<Path>, cfg: &SceneConfig, dataset_seed: u64, pairs: &[SamplePair]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records: Vec<ManifestRecord> = pairs
        .par_iter()
        .map(|p| {
            let stem = format!("{:06}", p.id);
            let rec = ManifestRecord {
                id: p.id,
                seed: p.seed,
                dataset_seed,
                frame1: format!("{stem}_10.png"),
                frame2: format!("{stem}_11.png"),
                flow: format!("{stem}_flow.flo"),
                valid: format!("{stem}_valid.png"),
                disparity: format!("{stem}_disp.png"),
                pose: p.pose,
                intrinsics: p.intrinsics,
            };
            imaging::save_png(&imaging::to_rgb(&p.i1)?, dir.join(&rec.frame1))?;
            imaging::save_png(&imaging::to_rgb(&p.i2)?, dir.join(&rec.frame2))?;
            write_flo(&p.gt_flow, dir.join(&rec.flow))?;
            let (h, w) = (p.height(), p.width());
            let valid = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                Luma([if p.valid.data()[y as usize * w + x as usize] > 0.5 { 255 } else { 0 }])
            });
            imaging::save_png(&valid, dir.join(&rec.valid))?;
            let disp: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                let d = p.disparity.data()[y as usize * w + x as usize];
                Luma([(d * 256.0).round().clamp(0.0, u16::MAX as f32) as u16])
            });
            imaging::save_png(&disp, dir.join(&rec.disparity))?;
            Ok(rec)
        })
        .collect::<Result<_>>()?;

    let mut manifest = Vec::new();
    for rec in &records {
        serde_json::to_writer(&mut manifest, rec)?;
        manifest.push(b'\n');
    }
    let path = dir.join(MANIFEST);
    fs::File::create(&path)
        .and_then(|mut f| f.write_all(&manifest))
        .map_err(|e| Error::io(&path, e))?;
    let snapshot = toml::to_string(cfg).map_err(|e| config_err!("cannot serialize scene config: {e}"))?;
    let path = dir.join(SCENE_SNAPSHOT);
    fs::write(&path, snapshot).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = dir.as_ref().join(MANIFEST);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<SamplePair>> {
    let dir = dir.as_ref();
    read_manifest(dir)?
        .par_iter()
        .map(|rec| {
            let i1 = imaging::from_rgb(&imaging::load_rgb(dir.join(&rec.frame1))?);
            let i2 = imaging::from_rgb(&imaging::load_rgb(dir.join(&rec.frame2))?);
            let gt_flow = read_flo(dir.join(&rec.flow))?;
            let (h, w) = (i1.shape().h, i1.shape().w);
            if i2.shape() != i1.shape() || gt_flow.height() != h || gt_flow.width() != w {
                return Err(config_err!("sample {} has inconsistent dimensions", rec.id));
            }
            let valid = imaging::load_gray(dir.join(&rec.valid))?;
            let disp = imaging::load_gray16(dir.join(&rec.disparity))?;
            let shape = Shape::new(1, 1, h, w);
            Ok(SamplePair {
                id: rec.id,
                seed: rec.seed,
                i1,
                i2,
                gt_flow,
                valid: Tensor::from_fn(shape, |_, _, y, x| {
                    if valid.get_pixel(x as u32, y as u32).0[0] > 127 { 1.0 } else { 0.0 }
                }),
                disparity: Tensor::from_fn(shape, |_, _, y, x| disp.get_pixel(x as u32, y as u32).0[0] as f32 / 256.0),
                pose: rec.pose,
                intrinsics: rec.intrinsics,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_is_continuous_and_bounded() {
        for i in 0..200 {
            let (x, y) = (i as f32 * 0.37, i as f32 * 0.91);
            let a = value_noise(5, x, y, 8.0, 3, 0.5);
            let b = value_noise(5, x + 1e-3, y, 8.0, 3, 0.5);
            assert!((0.0..=1.0).contains(&a));
            assert!((a - b).abs() < 1e-2);
        }
    }

    #[test]
    fn layer_order_puts_later_sprites_on_top() {
        let cfg = SceneConfig::default();
        let mut scene = Scene::sample(&cfg.translation_only(0.0, 0.0), 1);
        let sprite = |c| Sprite {
            center: c,
            velocity: (0.0, 0.0),
            shape: Shape2::Disc { radius: 5.0 },
            texture_seed: 0,
            tint: [0.0; 3],
            disparity: 1.0,
        };
        scene.sprites = vec![sprite((10.0, 10.0)), sprite((12.0, 10.0))];
        assert_eq!(scene.layer(11.0, 10.0, 0.0), Some(1));
        assert_eq!(scene.layer(6.0, 10.0, 0.0), Some(0));
        assert_eq!(scene.layer(40.0, 40.0, 0.0), None);
    }

    #[test]
    fn validation_rejects_bad_dims_and_excess_motion() {
        let mut cfg = SceneConfig {
            height: 60,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.height = 64;
        cfg.sprites.max_speed = 10.0;
        assert!(cfg.validate().is_err());
    }
}
