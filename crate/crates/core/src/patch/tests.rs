use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::homography::{correspondence_points, fit_homography};
use super::*;
use crate::synth::{CameraPose, Intrinsics};

fn noise(seed: u64, shape: Shape) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random())
}

fn aligned(center: (f64, f64)) -> TransformSample {
    TransformSample {
        angle_deg: 0.0,
        scale: 1.0,
        center,
    }
}

#[test]
fn disc_mask_is_centred_and_symmetric() {
    let p = Patch::random(16, 16, 0).unwrap();
    let m = p.mask();
    assert!(m[8 * 16 + 8] && !m[0] && !m[15] && !m[15 * 16]);
    for y in 0..16 {
        for x in 0..16 {
            assert_eq!(m[y * 16 + x], m[y * 16 + 15 - x]);
            assert_eq!(m[y * 16 + x], m[(15 - y) * 16 + x]);
        }
    }
}

#[test]
fn aligned_identity_paste_copies_masked_pixels_exactly() {
    let img = noise(1, Shape::new(1, 3, 32, 48));
    let p = Patch::random(16, 16, 2).unwrap();
    // top-left of the patch lands on pixel (13, 8)
    let t = aligned((20.5, 15.5));
    let out = apply_patch(&img, &p, &t).unwrap();
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..48 {
                let (py, px) = (y as i64 - 8, x as i64 - 13);
                let inside = (0..16).contains(&py) && (0..16).contains(&px) && p.mask()[py as usize * 16 + px as usize];
                let expect = if inside {
                    p.pixels().at(0, c, py as usize, px as usize)
                } else {
                    img.at(0, c, y, x)
                };
                assert_eq!(out.at(0, c, y, x).to_bits(), expect.to_bits(), "({c},{y},{x})");
            }
        }
    }
}

#[test]
fn patch_of_the_underlying_content_is_transparent() {
    let img = noise(3, Shape::new(1, 3, 32, 48));
    let content = Tensor::from_fn(Shape::new(1, 3, 16, 16), |_, c, y, x| img.at(0, c, y + 8, x + 13));
    let p = Patch::new(content).unwrap();
    let out = apply_patch(&img, &p, &aligned((20.5, 15.5))).unwrap();
    assert_eq!(out, img);

    let rotated = TransformSample {
        angle_deg: 7.0,
        scale: 1.03,
        center: (24.2, 15.9),
    };
    let map = PasteMap::new(&p, (32, 48), &rotated).unwrap();
    assert_eq!(map.apply_transparent(&img).unwrap(), img);
}

#[test]
fn paste_gradient_matches_finite_differences() {
    let img: Tensor<f64> = noise(4, Shape::new(1, 3, 24, 24)).cast();
    let p = Patch::random(10, 10, 5).unwrap();
    let weights: Tensor<f64> = noise(6, Shape::new(1, 3, 24, 24)).cast();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = sample_transform(&mut rng, (24, 24), (10, 10), &TransformRanges::default()).unwrap();
        let map = PasteMap::new(&p, (24, 24), &t).unwrap();
        let run = |pix: &Tensor<f64>, grad: bool| {
            let mut g = Graph::<f64>::new();
            let base = g.constant(img.clone()).unwrap();
            let pv = g.leaf(pix.clone(), grad).unwrap();
            let w = g.constant(weights.clone()).unwrap();
            let out = map.apply_var(&mut g, base, pv).unwrap();
            let prod = g.mul(out, w).unwrap();
            let l = g.sum(prod).unwrap();
            (g, l, pv)
        };
        let pix: Tensor<f64> = p.pixels().cast();
        let (mut g, l, pv) = run(&pix, true);
        g.backward(l).unwrap();
        let analytic = g.grad(pv).unwrap().to_vec();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..pix.data().len() {
            let mut a = pix.clone();
            a.data_mut()[i] += h;
            let mut b = pix.clone();
            b.data_mut()[i] -= h;
            let (ga, la, _) = run(&a, false);
            let (gb, lb, _) = run(&b, false);
            let n = (ga.item(la) - gb.item(lb)) / (2.0 * h);
            worst = worst.max((n - analytic[i]).abs());
            scale = scale.max(n.abs());
        }
        assert!(scale > 0.0);
        assert!(worst / scale < 1e-4, "seed {seed}: {}", worst / scale);
        // pixels outside the disc receive no gradient
        for (i, g) in analytic.iter().enumerate() {
            if !p.mask()[i % 100] {
                assert_eq!(*g, 0.0);
            }
        }
    }
}

#[test]
fn pasting_twice_equals_pasting_once() {
    let img = noise(7, Shape::new(1, 3, 32, 32));
    let p = Patch::random(12, 12, 8).unwrap();
    let t = TransformSample {
        angle_deg: -8.5,
        scale: 0.97,
        center: (14.3, 17.8),
    };
    let once = apply_patch(&img, &p, &t).unwrap();
    let twice = apply_patch(&once, &p, &t).unwrap();
    assert_eq!(once, twice);
}

#[test]
fn symmetric_content_is_insensitive_to_rotation_sign() {
    let (side, r) = (24usize, 12.0f64);
    let c = (side as f64 - 1.0) / 2.0;
    // Curvature is low enough that two bilinear samples, each off by at most
    // (|f_xx| + |f_yy|) / 8, stay within the 1e-3 tolerance.
    let content = Tensor::from_fn(Shape::new(1, 3, side, side), |_, _, y, x| {
        let d = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt() / r;
        (0.5 + 0.06 * (1.0 - d * d).max(0.0).powi(2)) as f32
    });
    let p = Patch::new(content).unwrap();
    let img = Tensor::full(Shape::new(1, 3, 40, 40), 0.5);
    for angle in [3.0, 7.5, 10.0] {
        let at = |a: f64| {
            apply_patch(
                &img,
                &p,
                &TransformSample {
                    angle_deg: a,
                    scale: 1.0,
                    center: (19.5, 19.5),
                },
            )
            .unwrap()
        };
        let (pos, neg) = (at(angle), at(-angle));
        let diff = pos
            .data()
            .iter()
            .zip(neg.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff <= 1e-3, "angle {angle}: {diff}");
    }
}

#[test]
fn collapsed_ranges_pin_the_only_valid_centre() {
    let ranges = TransformRanges {
        angle_deg: [0.0, 0.0],
        scale: [1.0, 1.0],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = sample_transform(&mut rng, (16, 16), (16, 16), &ranges).unwrap();
    assert_eq!(t, aligned((7.5, 7.5)));
    let img = noise(9, Shape::new(1, 3, 16, 16));
    assert!(apply_patch(&img, &Patch::random(16, 16, 1).unwrap(), &t).is_ok());
}

#[test]
fn sampler_statistics_and_determinism() {
    let ranges = TransformRanges::default();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let samples: Vec<_> = (0..10_000)
        .map(|_| sample_transform(&mut rng, (64, 128), (16, 16), &ranges).unwrap())
        .collect();
    let mean = samples.iter().map(|s| s.angle_deg).sum::<f64>() / samples.len() as f64;
    assert!(mean.abs() <= 0.5, "mean angle {mean}");
    for s in &samples {
        assert!((-10.0..=10.0).contains(&s.angle_deg));
        assert!((0.95..=1.05).contains(&s.scale));
        let e = 1.05 * 8.0;
        assert!(s.center.0 - e >= -0.5 - 1e-9 && s.center.0 + e <= 127.5 + 1e-9);
        assert!(s.center.1 - e >= -0.5 - 1e-9 && s.center.1 + e <= 63.5 + 1e-9);
    }
    let mut again = ChaCha8Rng::seed_from_u64(42);
    let first = sample_transform(&mut again, (64, 128), (16, 16), &ranges).unwrap();
    assert_eq!(first, samples[0]);
    assert!(sample_transform(&mut rng, (16, 16), (20, 20), &ranges).is_err());
}

#[test]
fn out_of_bounds_placement_is_rejected() {
    let img = noise(1, Shape::new(1, 3, 32, 32));
    let p = Patch::random(16, 16, 0).unwrap();
    assert!(matches!(apply_patch(&img, &p, &aligned((4.0, 16.0))), Err(Error::Placement(_))));
}

fn cam() -> Intrinsics {
    Intrinsics {
        focal: 74.0,
        cx: 63.5,
        cy: 31.5,
        baseline: 0.54,
    }
}

#[test]
fn identity_pose_gives_identity_homography() {
    let t1 = TransformSample {
        angle_deg: 4.0,
        scale: 1.02,
        center: (40.0, 30.0),
    };
    let m = estimate_patch_homography(&t1, (16, 16), 3.0, &CameraPose::identity(), &cam()).unwrap();
    assert!((m.h - nalgebra::Matrix3::identity()).abs().max() < 1e-9);
}

#[test]
fn in_plane_camera_translation_gives_the_closed_form_shift() {
    let t1 = aligned((50.0, 30.0));
    let (tx, ty, disparity) = (0.3, -0.1, 4.0);
    let pose = CameraPose {
        translation: [tx, ty, 0.0],
        ..CameraPose::identity()
    };
    let c = cam();
    let m = estimate_patch_homography(&t1, (16, 16), disparity, &pose, &c).unwrap();
    let depth = c.focal * c.baseline / disparity;
    let (sx, sy) = (c.focal * tx / depth, c.focal * ty / depth);
    for (x, y) in correspondence_points(&t1, (16, 16)) {
        let (u, v) = m.apply(x, y);
        assert!((u - x - sx).abs() < 1e-6 && (v - y - sy).abs() < 1e-6);
    }
}

#[test]
fn dlt_reproduces_general_correspondences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let t1 = sample_transform(&mut rng, (64, 128), (16, 16), &TransformRanges::default()).unwrap();
        let (a, b): (f64, f64) = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
        let (ca, sa, cb, sb) = (a.cos(), a.sin(), b.cos(), b.sin());
        // yaw then roll
        let ry = [[ca, 0.0, sa], [0.0, 1.0, 0.0], [-sa, 0.0, ca]];
        let rz = [[cb, -sb, 0.0], [sb, cb, 0.0], [0.0, 0.0, 1.0]];
        let mut rot = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rot[i][j] = (0..3).map(|k| rz[i][k] * ry[k][j]).sum();
            }
        }
        let pose = CameraPose {
            rotation: rot,
            translation: [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.5..0.5)],
        };
        let c = cam();
        let d = rng.random_range(2.0..8.0);
        let m = estimate_patch_homography(&t1, (16, 16), d, &pose, &c).unwrap();
        let depth = c.focal * c.baseline / d;
        for (x, y) in correspondence_points(&t1, (16, 16)) {
            let p = [(x - c.cx) * depth / c.focal, (y - c.cy) * depth / c.focal, depth];
            let q: Vec<f64> = (0..3)
                .map(|i| (0..3).map(|k| rot[i][k] * p[k]).sum::<f64>() + pose.translation[i])
                .collect();
            let (ex, ey) = (c.focal * q[0] / q[2] + c.cx, c.focal * q[1] / q[2] + c.cy);
            let (u, v) = m.apply(x, y);
            assert!((u - ex).hypot(v - ey) < 1e-6);
        }
        assert!((m.h[(2, 2)] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn collinear_correspondences_are_degenerate() {
    let src = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)];
    assert!(matches!(fit_homography(&src, &src), Err(Error::Degenerate(_))));
    assert!(estimate_patch_homography(&aligned((40.0, 30.0)), (16, 16), 0.0, &CameraPose::identity(), &cam()).is_err());
}

#[test]
fn identity_motion_matches_the_static_paste() {
    let i1 = noise(10, Shape::new(1, 3, 32, 48));
    let i2 = noise(11, Shape::new(1, 3, 32, 48));
    let p = Patch::random(12, 12, 3).unwrap();
    let t = TransformSample {
        angle_deg: 5.0,
        scale: 1.0,
        center: (20.2, 14.7),
    };
    let (a, b) = apply_patch_pair_moving(&i1, &i2, &p, &t, &PatchMotion::identity()).unwrap();
    assert_eq!(a, apply_patch(&i1, &p, &t).unwrap());
    assert_eq!(b, apply_patch(&i2, &p, &t).unwrap());
}

#[test]
fn translating_motion_moves_the_patch_centroid_exactly() {
    let img = Tensor::zeros(Shape::new(1, 3, 32, 48));
    let p = Patch::random(12, 12, 4).unwrap();
    let t = aligned((20.5, 14.5));
    let (m1, m2) = moving_maps(&p, (32, 48), &t, &PatchMotion::translation(2.0, 0.0)).unwrap();
    let centroid = |fp: Vec<bool>| {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for (i, &on) in fp.iter().enumerate() {
            if on {
                sx += (i % 48) as f64;
                sy += (i / 48) as f64;
                n += 1.0;
            }
        }
        (sx / n, sy / n)
    };
    let (c1, c2) = (centroid(m1.footprint()), centroid(m2.footprint()));
    assert_eq!((c2.0 - c1.0, c2.1 - c1.1), (2.0, 0.0));
    let (a, b) = apply_patch_pair_moving(&img, &img, &p, &t, &PatchMotion::translation(2.0, 0.0)).unwrap();
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..46 {
                assert_eq!(a.at(0, c, y, x), b.at(0, c, y, x + 2));
            }
        }
    }
}

#[test]
fn disparity_sample_respects_free_space() {
    let disp = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_, _, y, x| 1.0 + (y * 8 + x) as f32 / 10.0);
    let fp: Vec<bool> = (0..64).map(|i| (20..30).contains(&i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let d = sample_patch_disparity(&mut rng, &disp, &fp).unwrap();
        assert!((3.0 - 1e-6..=7.3 + 1e-6).contains(&d));
    }
    assert!(sample_patch_disparity(&mut rng, &disp, &[false; 64]).is_err());
}

#[test]
fn png_round_trip_is_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.png");
    let p = Patch::random(16, 16, 12).unwrap();
    p.save(&path, serde_json::json!({"mode": "white"})).unwrap();
    let (q, meta) = Patch::load(&path).unwrap();
    let meta = meta.unwrap();
    assert_eq!((meta.height, meta.width, meta.mask_diameter), (16, 16, 16));
    let worst = p
        .pixels()
        .data()
        .iter()
        .zip(q.pixels().data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(worst <= 0.5 / 255.0 + 1e-6, "{worst}");
}

#[test]
fn updates_are_projected_to_unit_range() {
    let mut p = Patch::random(4, 4, 0).unwrap();
    let wild = Tensor::from_fn(Shape::new(1, 3, 4, 4), |_, c, y, x| (c as f32 - 1.0) * (y + x) as f32);
    p.set_pixels(wild).unwrap();
    assert!(p.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(p.set_pixels(Tensor::zeros(Shape::new(1, 3, 5, 4))).is_err());
}
