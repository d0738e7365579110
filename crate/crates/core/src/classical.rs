//! Coarse-to-fine Horn–Schunck with a quadratic penalty.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::flow::FlowField;
use crate::networks::FlowMethod;
use crate::tensor::{kernels, Shape, Tensor};

/// Smallest pyramid side; coarser levels are skipped.
const MIN_LEVEL_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HSConfig {
    /// Smoothness weight, on the 0..255 intensity scale.
    pub alpha: f64,
    pub iters_per_level: usize,
    pub levels: usize,
    pub warps_per_level: usize,
}

impl Default for HSConfig {
    fn default() -> Self {
        HSConfig {
            alpha: 15.0,
            iters_per_level: 100,
            levels: 4,
            warps_per_level: 3,
        }
    }
}

impl HSConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(config_err!("alpha must be positive, got {}", self.alpha));
        }
        if self.iters_per_level == 0 || self.levels == 0 || self.warps_per_level == 0 {
            return Err(config_err!(
                "iters_per_level ({}), levels ({}) and warps_per_level ({}) must all be at least 1",
                self.iters_per_level,
                self.levels,
                self.warps_per_level
            ));
        }
        Ok(())
    }
}

/// Rec. 601 luma of a `1 x 3 x H x W` image; single-channel input passes through.
pub fn luma(img: &Tensor) -> Result<Tensor> {
    let s = img.shape();
    match (s.n, s.c) {
        (1, 1) => Ok(img.clone()),
        (1, 3) => {
            let p = s.plane();
            let d = img.data();
            let out = (0..p)
                .map(|i| 0.299 * d[i] + 0.587 * d[p + i] + 0.114 * d[2 * p + i])
                .collect();
            Tensor::new(Shape::new(1, 1, s.h, s.w), out)
        }
        _ => Err(config_err!("luma: expected a single 1- or 3-channel image, got {s}")),
    }
}

/// A grayscale plane in f64.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    fn at(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.data[y * self.w + x]
    }

    fn shape(&self) -> Shape {
        Shape::new(1, 1, self.h, self.w)
    }

    fn downsample(&self) -> Plane {
        let (data, s) = kernels::avg_pool2(&self.data, self.shape());
        Plane { h: s.h, w: s.w, data }
    }
}

/// Weighted neighbourhood average with edge replication (1/6 edges, 1/12 corners).
fn local_mean(f: &Plane) -> Vec<f64> {
    let mut out = Vec::with_capacity(f.data.len());
    for y in 0..f.h as isize {
        for x in 0..f.w as isize {
            let edges = f.at(y - 1, x) + f.at(y + 1, x) + f.at(y, x - 1) + f.at(y, x + 1);
            let corners = f.at(y - 1, x - 1) + f.at(y - 1, x + 1) + f.at(y + 1, x - 1) + f.at(y + 1, x + 1);
            out.push(edges / 6.0 + corners / 12.0);
        }
    }
    out
}

/// Estimates flow from `i1` to `i2` (grayscale or RGB, values in `[0, 1]`).
pub fn horn_schunck(i1: &Tensor, i2: &Tensor, cfg: &HSConfig) -> Result<FlowField> {
    cfg.validate()?;
    if i1.shape() != i2.shape() {
        return Err(config_err!("horn_schunck: frame shapes {} and {} differ", i1.shape(), i2.shape()));
    }
    let to_plane = |t: &Tensor| -> Result<Plane> {
        let g = luma(t)?;
        let s = g.shape();
        Ok(Plane {
            h: s.h,
            w: s.w,
            data: g.data().iter().map(|&v| f64::from(v) * 255.0).collect(),
        })
    };
    let mut pyr1 = vec![to_plane(i1)?];
    let mut pyr2 = vec![to_plane(i2)?];
    while pyr1.len() < cfg.levels {
        let last = pyr1.last().expect("non-empty");
        if last.h % 2 != 0 || last.w % 2 != 0 || last.h / 2 < MIN_LEVEL_SIDE || last.w / 2 < MIN_LEVEL_SIDE {
            break;
        }
        let next1 = last.downsample();
        let next2 = pyr2.last().expect("non-empty").downsample();
        pyr1.push(next1);
        pyr2.push(next2);
    }

    let coarsest = pyr1.last().expect("non-empty");
    let mut u = vec![0.0; coarsest.data.len()];
    let mut v = vec![0.0; coarsest.data.len()];
    for level in (0..pyr1.len()).rev() {
        let (f1, f2) = (&pyr1[level], &pyr2[level]);
        if u.len() != f1.data.len() {
            let coarse = Shape::new(1, 1, f1.h / 2, f1.w / 2);
            u = kernels::upsample2(&u, coarse).0.into_iter().map(|x| 2.0 * x).collect();
            v = kernels::upsample2(&v, coarse).0.into_iter().map(|x| 2.0 * x).collect();
        }
        for _ in 0..cfg.warps_per_level {
            refine(f1, f2, &mut u, &mut v, cfg);
        }
    }

    let w = pyr1[0].w;
    Ok(FlowField::from_fn(pyr1[0].h, w, |y, x| {
        (u[y * w + x] as f32, v[y * w + x] as f32)
    }))
}

/// One warp: linearize brightness constancy around the current flow and run Jacobi sweeps.
fn refine(f1: &Plane, f2: &Plane, u: &mut Vec<f64>, v: &mut Vec<f64>, cfg: &HSConfig) {
    let mut flow = u.clone();
    flow.extend_from_slice(v);
    let warped = Plane {
        h: f2.h,
        w: f2.w,
        data: kernels::warp(&f2.data, f2.shape(), &flow),
    };
    let avg = Plane {
        h: f1.h,
        w: f1.w,
        data: f1.data.iter().zip(&warped.data).map(|(a, b)| 0.5 * (a + b)).collect(),
    };
    let n = f1.data.len();
    let (mut ix, mut iy, mut it) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for y in 0..f1.h {
        for x in 0..f1.w {
            let (yi, xi) = (y as isize, x as isize);
            let p = y * f1.w + x;
            ix[p] = 0.5 * (avg.at(yi, xi + 1) - avg.at(yi, xi - 1));
            iy[p] = 0.5 * (avg.at(yi + 1, xi) - avg.at(yi - 1, xi));
            it[p] = warped.data[p] - f1.data[p];
        }
    }
    let (u0, v0) = (u.clone(), v.clone());
    let a2 = cfg.alpha * cfg.alpha;
    for _ in 0..cfg.iters_per_level {
        let ub = local_mean(&Plane { h: f1.h, w: f1.w, data: std::mem::take(u) });
        let vb = local_mean(&Plane { h: f1.h, w: f1.w, data: std::mem::take(v) });
        *u = Vec::with_capacity(n);
        *v = Vec::with_capacity(n);
        for p in 0..n {
            let r = ix[p] * (ub[p] - u0[p]) + iy[p] * (vb[p] - v0[p]) + it[p];
            let k = r / (a2 + ix[p] * ix[p] + iy[p] * iy[p]);
            u.push(ub[p] - ix[p] * k);
            v.push(vb[p] - iy[p] * k);
        }
    }
}

/// Horn–Schunck as a named flow method.
#[derive(Clone, Debug, Default)]
pub struct HornSchunck {
    pub cfg: HSConfig,
}

impl FlowMethod for HornSchunck {
    fn name(&self) -> &str {
        "hs"
    }

    fn estimate(&self, i1: &Tensor, i2: &Tensor) -> Result<FlowField> {
        horn_schunck(i1, i2, &self.cfg)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::synth::{generate_pair, SceneConfig};

    fn median(mut v: Vec<f32>) -> f32 {
        v.sort_by(f32::total_cmp);
        v[v.len() / 2]
    }

    fn total_variation(f: &FlowField) -> f64 {
        let (h, w) = (f.height(), f.width());
        let mut tv = 0.0;
        for ch in [f.u(), f.v()] {
            for y in 0..h {
                for x in 0..w {
                    let c = f64::from(ch[y * w + x]);
                    if x + 1 < w {
                        tv += (f64::from(ch[y * w + x + 1]) - c).abs();
                    }
                    if y + 1 < h {
                        tv += (f64::from(ch[(y + 1) * w + x]) - c).abs();
                    }
                }
            }
        }
        tv
    }

    #[test]
    fn identical_frames_give_exact_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::from_fn(Shape::new(1, 3, 32, 48), |_, _, _, _| rng.random());
        let f = horn_schunck(&img, &img, &HSConfig::default()).unwrap();
        assert!(f.u().iter().chain(f.v()).all(|&x| x == 0.0));
    }

    #[test]
    fn recovers_a_one_pixel_shift() {
        let pair = generate_pair(&SceneConfig::default().translation_only(1.0, 0.0), 21).unwrap();
        let f = horn_schunck(&pair.i1, &pair.i2, &HSConfig::default()).unwrap();
        let mask = pair.valid_mask();
        let pick = |c: &[f32]| median(c.iter().zip(&mask).filter(|(_, &m)| m).map(|(&x, _)| x).collect());
        let (mu, mv) = (pick(f.u()), pick(f.v()));
        assert!((0.8..=1.2).contains(&mu), "median u {mu}");
        assert!((-0.2..=0.2).contains(&mv), "median v {mv}");
    }

    #[test]
    fn stronger_smoothing_never_raises_total_variation() {
        let cfg = SceneConfig {
            height: 32,
            width: 64,
            ..Default::default()
        };
        for seed in 0..5 {
            let pair = generate_pair(&cfg, 300 + seed).unwrap();
            let base = HSConfig::default();
            let doubled = HSConfig {
                alpha: 2.0 * base.alpha,
                ..base.clone()
            };
            let a = total_variation(&horn_schunck(&pair.i1, &pair.i2, &base).unwrap());
            let b = total_variation(&horn_schunck(&pair.i1, &pair.i2, &doubled).unwrap());
            assert!(b <= a, "seed {seed}: {b} > {a}");
        }
    }

    #[test]
    fn luma_weights_and_validation() {
        let img = Tensor::new(Shape::new(1, 3, 1, 1), vec![1.0, 0.0, 0.0]).unwrap();
        assert!((luma(&img).unwrap().data()[0] - 0.299).abs() < 1e-7);
        assert!(HSConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(HSConfig { levels: 0, ..Default::default() }.validate().is_err());
        let a = Tensor::zeros(Shape::new(1, 1, 16, 16));
        let b = Tensor::zeros(Shape::new(1, 1, 16, 8));
        assert!(horn_schunck(&a, &b, &HSConfig::default()).is_err());
    }
}
