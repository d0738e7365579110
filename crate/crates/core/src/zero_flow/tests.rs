use super::*;
use crate::classical::HornSchunck;
use crate::networks::{Family, Network, NetworkParams, NetworkSpec};
use crate::tensor::Graph;

#[test]
fn constant_maps_score_zero() {
    let m = Tensor::full(Shape::new(1, 4, 8, 8), 2.5);
    assert_eq!(spatial_invariance_score(&m), 0.0);
    assert_eq!(checkerboard_score(&m), Some(0.0));
}

#[test]
fn one_hot_map_has_closed_form_spread() {
    let mut m = Tensor::zeros(Shape::new(1, 3, 8, 8));
    m.data_mut()[64 + 19] = 4.0;
    let s = spatial_invariance_score(&m);
    // mean 4/64, std 4 sqrt(63)/64: the ratio is sqrt(63) up to the 1e-8 guard
    assert!((s - 63f64.sqrt()).abs() / 63f64.sqrt() < 1e-6, "{s}");
}

#[test]
fn spread_ignores_positive_rescaling() {
    let m = Tensor::from_fn(Shape::new(1, 2, 6, 6), |_, c, y, x| ((c + 1) * (y * 6 + x)) as f32 * 0.1);
    let big = Tensor::from_fn(m.shape(), |_, c, y, x| 37.0 * m.at(0, c, y, x));
    assert!((spatial_invariance_score(&m) - spatial_invariance_score(&big)).abs() < 1e-6);
}

#[test]
fn checkerboard_scores_one_and_needs_four_pixels() {
    let m = Tensor::from_fn(Shape::new(1, 2, 8, 10), |_, _, y, x| if (x + y) % 2 == 0 { 1.0 } else { -1.0 });
    assert!((checkerboard_score(&m).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(checkerboard_score(&Tensor::zeros(Shape::new(1, 1, 3, 8))), None);
}

#[test]
fn strided_deconvolution_of_a_constant_shows_up() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(Shape::new(1, 1, 8, 8), 1.0)).unwrap();
    let k = g.constant(Tensor::full(Shape::new(1, 1, 3, 3), 1.0)).unwrap();
    let y = g.conv_transpose2d(x, k, None, 2, 0).unwrap();
    let score = checkerboard_score(g.value(y)).unwrap();
    assert!(score > 0.1, "{score}");
}

#[test]
fn zero_network_traces_are_zero() {
    let net = Network::new("z", NetworkParams::zeros(&NetworkSpec::new(Family::EncoderDecoder)).unwrap());
    let patch = Patch::random(16, 16, 1).unwrap();
    let r = zero_flow_test(&net, Some(&patch), &ZeroFlowConfig::default()).unwrap();
    assert!(!r.layers.is_empty());
    assert!(r.layers.iter().all(|l| l.mean_norm_without == 0.0 && l.mean_norm_with == Some(0.0)));
    assert_eq!((r.flow_max_mag_without, r.flow_max_mag_with), (0.0, Some(0.0)));
    assert!(r.amplification().is_none());
}

#[test]
fn classical_solver_stays_at_zero() {
    let hs = HornSchunck::default();
    let patch = Patch::random(16, 16, 2).unwrap();
    for seed in 0..3 {
        let cfg = ZeroFlowConfig {
            seed,
            ..Default::default()
        };
        let r = zero_flow_test(&hs, Some(&patch), &cfg).unwrap();
        assert!(r.layers.is_empty());
        assert!(r.flow_max_mag_without < 1e-6 && r.flow_max_mag_with.unwrap() < 1e-6);
    }
}

#[test]
fn reports_are_reproducible_and_written() {
    let net = Network::new("ed", NetworkParams::init(&NetworkSpec::new(Family::EncoderDecoder), 4).unwrap());
    let patch = Patch::random(16, 16, 3).unwrap();
    let cfg = ZeroFlowConfig {
        seed: 8,
        ..Default::default()
    };
    let a = zero_flow_test(&net, Some(&patch), &cfg).unwrap();
    let b = zero_flow_test(&net, Some(&patch), &cfg).unwrap();
    assert_eq!(a, b);
    for l in &a.layers {
        assert!(l.mean_norm_without >= 0.0 && l.mean_norm_without.is_finite());
        assert!(l.mean_norm_with.unwrap() >= 0.0);
    }
    let dir = tempfile::tempdir().unwrap();
    a.write(dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("ed_zeroflow.csv")).unwrap();
    assert_eq!(csv.lines().count(), a.layers.len() + 2);
    let thumbs = std::fs::read_dir(dir.path().join("ed_thumbs")).unwrap().count();
    assert_eq!(thumbs, 2 * a.layers.len());
}
