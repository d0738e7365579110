use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flowpatch::attack::cosine_loss;
use flowpatch::eval::{epe, evaluate_attack, relative_degradation, Adversary, EvalConfig, PlacementPolicy};
use flowpatch::flow::FlowField;
use flowpatch::networks::FlowMethod;
use flowpatch::patch::{sample_transform, PasteMap, Patch, TransformRanges};
use flowpatch::synth::{generate_dataset, generate_pair, SamplePair, SceneConfig};
use flowpatch::tensor::{Shape, Tensor};

fn field(seed: u64, h: usize, w: usize, amp: f32) -> FlowField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FlowField::from_fn(h, w, |_, _| (rng.random_range(-amp..amp), rng.random_range(-amp..amp)))
}

/// Cheap input-dependent estimator: the frame difference of the first two
/// channels, read as a flow.
struct Difference;

impl FlowMethod for Difference {
    fn name(&self) -> &str {
        "diff"
    }

    fn estimate(&self, i1: &Tensor, i2: &Tensor) -> flowpatch::Result<FlowField> {
        let s = i1.shape();
        Ok(FlowField::from_fn(s.h, s.w, |y, x| {
            (4.0 * (i2.at(0, 0, y, x) - i1.at(0, 0, y, x)), 4.0 * (i2.at(0, 1, y, x) - i1.at(0, 1, y, x)))
        }))
    }
}

fn small_data(seed: u64) -> Vec<SamplePair> {
    let cfg = SceneConfig {
        height: 32,
        width: 64,
        ..SceneConfig::default()
    };
    generate_dataset(&cfg, 3, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cosine_is_bounded_and_scale_free(seed in any::<u64>(), s in 0.01f32..100.0) {
        let (a, b) = (field(seed, 9, 13, 4.0), field(seed ^ 1, 9, 13, 4.0));
        let l = cosine_loss(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&l));
        let scaled = FlowField::from_fn(9, 13, |y, x| {
            let (u, v) = b.get(y, x);
            (s * u, s * v)
        });
        prop_assert!((cosine_loss(&a, &scaled).unwrap() - l).abs() < 1e-6);
        prop_assert!((cosine_loss(&a, &a).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn epe_matches_a_scalar_loop(seed in any::<u64>(), keep in 0.05f64..1.0) {
        let (a, b) = (field(seed, 32, 32, 6.0), field(seed.wrapping_add(7), 32, 32, 6.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask: Vec<bool> = (0..32 * 32).map(|_| rng.random_range(0.0..1.0) < keep).collect();
        mask[0] = true;
        let (mut acc, mut n) = (0.0f64, 0usize);
        for y in 0..32 {
            for x in 0..32 {
                if mask[y * 32 + x] {
                    let ((u, v), (gu, gv)) = (a.get(y, x), b.get(y, x));
                    acc += (f64::from(u) - f64::from(gu)).hypot(f64::from(v) - f64::from(gv));
                    n += 1;
                }
            }
        }
        prop_assert!((epe(&a, &b, Some(&mask)).unwrap() - acc / n as f64).abs() < 1e-6);
        prop_assert_eq!(epe(&a, &a, None).unwrap(), 0.0);
    }

    #[test]
    fn paste_leaves_everything_outside_the_footprint_alone(seed in any::<u64>(), size in 4usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::from_fn(Shape::new(1, 3, 40, 56), |_, _, _, _| rng.random_range(0.0..1.0));
        let p = Patch::random(size, size, seed).unwrap();
        let ranges = TransformRanges { angle_deg: [-45.0, 45.0], scale: [0.8, 1.2] };
        let t = sample_transform(&mut rng, (40, 56), (size, size), &ranges).unwrap();
        let map = PasteMap::new(&p, (40, 56), &t).unwrap();
        let out = map.apply(&img, &p).unwrap();
        let foot = map.footprint();
        prop_assert!(foot.iter().any(|&f| f));
        for c in 0..3 {
            for (i, &inside) in foot.iter().enumerate() {
                let k = c * 40 * 56 + i;
                if !inside {
                    prop_assert_eq!(out.data()[k].to_bits(), img.data()[k].to_bits());
                }
            }
        }
        // the footprint pixels are in [0, 1] like the patch
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn equal_epes_mean_no_degradation(e in 0.0f64..100.0, d in 0.0f64..100.0) {
        prop_assert_eq!(relative_degradation(e, e), Some(0.0));
        if e > 0.0 {
            let r = relative_degradation(e, e + d).unwrap();
            prop_assert!(r >= 0.0);
            prop_assert!((r - 100.0 * d / e).abs() <= 1e-9 * r.abs().max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn attacked_epe_splits_into_patch_and_rest(seed in 0u64..1000, moving in any::<bool>()) {
        let data = small_data(seed);
        let cfg = EvalConfig {
            policy: if moving { PlacementPolicy::RealisticMotion } else { PlacementPolicy::RandomStatic },
            seed,
            ..EvalConfig::default()
        };
        let patch = Patch::random(8, 8, seed).unwrap();
        let rep = evaluate_attack(&[&Difference as &dyn FlowMethod], &Adversary::Patch(patch), &data, &cfg).unwrap();
        let m = &rep.methods[0];
        let inside = m.epe_attacked_patch_region.unwrap();
        let n = (m.pixels_in_patch + m.pixels_outside) as f64;
        let whole = (inside * m.pixels_in_patch as f64 + m.epe_attacked_excl_patch * m.pixels_outside as f64) / n;
        prop_assert!((whole - m.epe_attacked).abs() < 1e-6, "{} vs {}", whole, m.epe_attacked);
    }

    #[test]
    fn evaluation_is_deterministic(seed in 0u64..1000) {
        let data = small_data(seed);
        let cfg = EvalConfig { seed, ..EvalConfig::default() };
        let patch = Patch::random(8, 8, seed).unwrap();
        let a = evaluate_attack(&[&Difference as &dyn FlowMethod], &Adversary::Patch(patch.clone()), &data, &cfg).unwrap();
        let b = evaluate_attack(&[&Difference as &dyn FlowMethod], &Adversary::Patch(patch), &data, &cfg).unwrap();
        prop_assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn scene_generation_is_deterministic(seed in any::<u64>()) {
        let cfg = SceneConfig { height: 32, width: 64, ..SceneConfig::default() };
        let (a, b) = (generate_pair(&cfg, seed).unwrap(), generate_pair(&cfg, seed).unwrap());
        prop_assert_eq!(&a.i1, &b.i1);
        prop_assert_eq!(&a.i2, &b.i2);
        prop_assert_eq!(a.gt_flow.tensor(), b.gt_flow.tensor());
    }

    #[test]
    fn transparent_adversary_changes_nothing(seed in 0u64..1000) {
        let data = small_data(seed);
        let cfg = EvalConfig { seed, ..EvalConfig::default() };
        let patch = Patch::random(8, 8, seed).unwrap();
        let rep = evaluate_attack(&[&Difference as &dyn FlowMethod], &Adversary::Transparent(patch), &data, &cfg).unwrap();
        let m = &rep.methods[0];
        prop_assert_eq!(m.epe_clean, m.epe_attacked);
        prop_assert_eq!(m.rel_degradation_pct, Some(0.0));
    }
}
