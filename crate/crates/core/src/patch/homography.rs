//! Patch motion between frames for a patch stuck to a fronto-parallel plane.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::synth::{CameraPose, Intrinsics};
use crate::tensor::Tensor;

use super::TransformSample;

/// Frame-1 to frame-2 image homography, normalized so `h[(2, 2)] = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchMotion {
    pub h: Matrix3<f64>,
}

impl PatchMotion {
    pub fn identity() -> Self {
        PatchMotion { h: Matrix3::identity() }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        let mut h = Matrix3::identity();
        h[(0, 2)] = dx;
        h[(1, 2)] = dy;
        PatchMotion { h }
    }

    /// Normalizes and checks finiteness and invertibility.
    pub fn new(h: Matrix3<f64>) -> Result<Self> {
        let s = h[(2, 2)];
        if !h.iter().all(|v| v.is_finite()) || s.abs() < 1e-15 {
            return Err(Error::Degenerate(format!("homography {h} cannot be normalized")));
        }
        let h = h / s;
        if h.determinant().abs() <= 1e-12 {
            return Err(Error::Degenerate(format!("homography {h} is singular")));
        }
        Ok(PatchMotion { h })
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.h * Vector3::new(x, y, 1.0);
        (p.x / p.z, p.y / p.z)
    }

    pub fn inverse(&self) -> Result<PatchMotion> {
        let inv = self
            .h
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("homography is not invertible".into()))?;
        PatchMotion::new(inv)
    }
}

/// Translate and scale points to zero mean and mean distance sqrt(2).
fn normalizer(pts: &[(f64, f64)]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
    let d = pts.iter().map(|p| (p.0 - mx).hypot(p.1 - my)).sum::<f64>() / n;
    let s = if d > 0.0 { std::f64::consts::SQRT_2 / d } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

fn apply_h(h: &Matrix3<f64>, p: (f64, f64)) -> (f64, f64) {
    let v = h * Vector3::new(p.0, p.1, 1.0);
    (v.x / v.z, v.y / v.z)
}

/// Normalized direct linear transform over at least four correspondences.
pub fn fit_homography(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<PatchMotion> {
    if src.len() != dst.len() || src.len() < 4 {
        return Err(Error::Degenerate(format!(
            "need at least four correspondences, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    if !has_general_position(src) || !has_general_position(dst) {
        return Err(Error::Degenerate("correspondences are collinear".into()));
    }
    let (ts, td) = (normalizer(src), normalizer(dst));
    let mut a = DMatrix::<f64>::zeros(2 * src.len().max(5), 9);
    for (i, (&s, &d)) in src.iter().zip(dst).enumerate() {
        let (x, y) = apply_h(&ts, s);
        let (u, v) = apply_h(&td, d);
        let rows = [
            [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u],
            [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v],
        ];
        for (k, row) in rows.iter().enumerate() {
            for (j, &val) in row.iter().enumerate() {
                a[(2 * i + k, j)] = val;
            }
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let k = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))
        .map(|(i, _)| i)
        .expect("nine singular values");
    let row = vt.row(k);
    let hn = Matrix3::from_row_slice(&row.iter().copied().collect::<Vec<_>>());
    let inv_td = td
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("destination points coincide".into()))?;
    PatchMotion::new(inv_td * hn * ts)
}

/// Whether some three points span a triangle.
fn has_general_position(pts: &[(f64, f64)]) -> bool {
    let scale = pts
        .iter()
        .flat_map(|p| [p.0.abs(), p.1.abs()])
        .fold(1.0, f64::max);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            for k in j + 1..pts.len() {
                let (a, b, c) = (pts[i], pts[j], pts[k]);
                let area = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
                if area.abs() > 1e-9 * scale * scale {
                    return true;
                }
            }
        }
    }
    false
}

/// Frame-1 image points used for the fit: the four patch corners and the centre.
pub fn correspondence_points(t1: &TransformSample, patch_dims: (usize, usize)) -> [(f64, f64); 5] {
    let (hh, hw) = (patch_dims.0 as f64 / 2.0, patch_dims.1 as f64 / 2.0);
    [
        t1.forward(-hw, -hh),
        t1.forward(hw, -hh),
        t1.forward(hw, hh),
        t1.forward(-hw, hh),
        t1.center,
    ]
}

/// Projects the frame-1 patch points into frame 2 through a plane at the
/// given disparity and fits the image homography.
pub fn estimate_patch_homography(
    t1: &TransformSample,
    patch_dims: (usize, usize),
    disparity: f64,
    pose: &CameraPose,
    cam: &Intrinsics,
) -> Result<PatchMotion> {
    if !(disparity > 0.0 && disparity.is_finite()) {
        return Err(Error::Degenerate(format!("disparity must be positive, got {disparity}")));
    }
    if !(cam.focal > 0.0 && cam.baseline > 0.0) {
        return Err(Error::Degenerate(format!("invalid intrinsics {cam:?}")));
    }
    let depth = cam.focal * cam.baseline / disparity;
    let r = Matrix3::from_fn(|i, j| pose.rotation[i][j]);
    let t = Vector3::from(pose.translation);
    let src = correspondence_points(t1, patch_dims);
    let mut dst = Vec::with_capacity(src.len());
    for &(x, y) in &src {
        let p1 = Vector3::new((x - cam.cx) * depth / cam.focal, (y - cam.cy) * depth / cam.focal, depth);
        let p2 = r * p1 + t;
        if p2.z <= 0.0 {
            return Err(Error::Degenerate("patch point falls behind the second camera".into()));
        }
        dst.push((cam.focal * p2.x / p2.z + cam.cx, cam.focal * p2.y / p2.z + cam.cy));
    }
    fit_homography(&src, &dst)
}

/// Disparity drawn uniformly between the smallest disparity under the patch
/// and the largest in the scene, so the patch never sits behind its surroundings.
pub fn sample_patch_disparity<R: Rng + ?Sized>(rng: &mut R, disparity: &Tensor, footprint: &[bool]) -> Result<f64> {
    let d = disparity.data();
    if d.len() != footprint.len() {
        return Err(Error::Config(format!(
            "disparity map has {} pixels, footprint {}",
            d.len(),
            footprint.len()
        )));
    }
    let lo = d
        .iter()
        .zip(footprint)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| f64::from(v))
        .fold(f64::INFINITY, f64::min);
    let hi = d.iter().map(|&v| f64::from(v)).fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !(lo > 0.0) {
        return Err(Error::Placement("patch footprint is empty or has non-positive disparity".into()));
    }
    Ok(if hi > lo { rng.random_range(lo..=hi) } else { lo })
}
