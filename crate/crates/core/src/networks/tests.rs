use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::synth::{generate_dataset, SceneConfig};

fn small_spec(family: Family) -> NetworkSpec {
    NetworkSpec {
        family,
        levels: 2,
        base_channels: 4,
        max_disp: 1,
        leaky_slope: 0.1,
    }
}

fn noise(seed: u64, shape: Shape) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random())
}

/// Mean final-flow magnitude as a function of the frame-1 pixels, in f64.
fn mean_magnitude(net: &Network, i1: &Tensor<f64>, i2: &Tensor<f64>, grad: bool) -> (f64, Option<Vec<f64>>) {
    let mut g = Graph::<f64>::new();
    let bound = net.params.bind(&mut g, false).unwrap();
    let a = g.leaf(i1.clone(), grad).unwrap();
    let b = g.constant(i2.clone()).unwrap();
    let fv = net.forward_graph(&mut g, &bound, a, b, None).unwrap();
    let s = g.shape(fv.final_flow);
    let zero = g.constant(Tensor::zeros(s)).unwrap();
    let m = g.epe_map(fv.final_flow, zero).unwrap();
    let l = g.mean(m).unwrap();
    let value = g.item(l);
    if grad {
        g.backward(l).unwrap();
        (value, Some(g.grad(a).unwrap().to_vec()))
    } else {
        (value, None)
    }
}

#[test]
fn forward_is_differentiable_end_to_end() {
    for family in [Family::EncoderDecoder, Family::SpatialPyramid] {
        let spec = NetworkSpec {
            levels: 3,
            ..small_spec(family)
        };
        let net = Network::new("n", NetworkParams::init(&spec, 3).unwrap());
        let shape = Shape::new(1, 3, 16, 16);
        let i1: Tensor<f64> = noise(1, shape).cast();
        let i2: Tensor<f64> = noise(2, shape).cast();
        let (_, analytic) = mean_magnitude(&net, &i1, &i2, true);
        let analytic = analytic.unwrap();
        let h = 1e-6;
        let mut numeric = Vec::new();
        for i in 0..i1.data().len() {
            let mut p = i1.clone();
            p.data_mut()[i] += h;
            let mut m = i1.clone();
            m.data_mut()[i] -= h;
            numeric.push((mean_magnitude(&net, &p, &i2, false).0 - mean_magnitude(&net, &m, &i2, false).0) / (2.0 * h));
        }
        let scale = numeric.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let err = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max)
            / scale;
        assert!(scale > 0.0);
        assert!(err < 1e-3, "{family:?}: relative error {err}");
    }
}

#[test]
fn zero_parameters_give_zero_flow() {
    for family in [Family::EncoderDecoder, Family::SpatialPyramid] {
        let spec = NetworkSpec::new(family);
        let net = Network::new("z", NetworkParams::zeros(&spec).unwrap());
        let shape = Shape::new(1, 3, 32, 64);
        let (out, trace) = net.predict(&noise(1, shape), &noise(2, shape), true).unwrap();
        assert!(out.final_flow.tensor().data().iter().all(|&v| v == 0.0));
        assert_eq!(out.per_level.len(), spec.levels);
        let trace = trace.unwrap();
        assert!(trace.entries.iter().all(|e| e.mean_norm == 0.0));
    }
}

#[test]
fn output_shapes_follow_the_pyramid() {
    for family in [Family::EncoderDecoder, Family::SpatialPyramid] {
        let spec = NetworkSpec::new(family);
        let net = Network::new("s", NetworkParams::init(&spec, 1).unwrap());
        let shape = Shape::new(1, 3, 64, 128);
        let (out, _) = net.predict(&noise(3, shape), &noise(4, shape), false).unwrap();
        assert_eq!((out.final_flow.height(), out.final_flow.width()), (64, 128));
        assert_eq!(out.per_level.len(), 4);
        for (i, f) in out.per_level.iter().enumerate() {
            assert_eq!((f.height(), f.width()), (4 << i, 8 << i));
        }
    }
}

#[test]
fn parameter_counts_stay_miniature() {
    for family in [Family::EncoderDecoder, Family::SpatialPyramid] {
        let n = NetworkParams::init(&NetworkSpec::new(family), 0).unwrap().num_parameters();
        assert!((50_000..=200_000).contains(&n), "{family:?}: {n}");
    }
}

#[test]
fn tracing_does_not_change_predictions() {
    for family in [Family::EncoderDecoder, Family::SpatialPyramid] {
        let net = Network::new("t", NetworkParams::init(&NetworkSpec::new(family), 5).unwrap());
        let shape = Shape::new(1, 3, 32, 64);
        let (i1, i2) = (noise(5, shape), noise(6, shape));
        let (plain, none) = net.predict(&i1, &i2, false).unwrap();
        let (traced, trace) = net.predict(&i1, &i2, true).unwrap();
        assert!(none.is_none());
        assert_eq!(plain.final_flow, traced.final_flow);
        let trace = trace.unwrap();
        assert!(!trace.entries.is_empty());
        assert!(trace
            .entries
            .iter()
            .all(|e| e.mean_norm >= 0.0 && e.mean_norm.is_finite() && e.spatial_std_ratio.is_finite()));
    }
}

#[test]
fn rejects_bad_inputs_and_specs() {
    let spec = NetworkSpec::new(Family::EncoderDecoder);
    let net = Network::new("r", NetworkParams::init(&spec, 0).unwrap());
    let bad = Tensor::zeros(Shape::new(1, 3, 30, 64));
    assert!(net.predict(&bad, &bad, false).is_err());
    assert!(NetworkParams::init(&NetworkSpec { levels: 1, ..spec.clone() }, 0).is_err());
    assert!(NetworkParams::init(&NetworkSpec { base_channels: 2, ..spec }, 0).is_err());
}

#[test]
fn zero_epochs_return_initialization() {
    let spec = small_spec(Family::SpatialPyramid);
    let cfg = TrainConfig {
        epochs: 0,
        level_weights: vec![0.32, 0.08],
        seed: 4,
        ..Default::default()
    };
    let (p, curve) = train_supervised(&[], &spec, &cfg).unwrap();
    assert!(curve.is_empty());
    assert_eq!(p, NetworkParams::init(&spec, 4).unwrap());
}

#[test]
fn training_is_seed_deterministic_and_reduces_loss() {
    let scene = SceneConfig {
        height: 32,
        width: 64,
        ..Default::default()
    };
    let data = generate_dataset(&scene, 8, 11).unwrap();
    let spec = small_spec(Family::EncoderDecoder);
    let cfg = TrainConfig {
        epochs: 3,
        lr: 1e-2,
        level_weights: vec![0.32, 0.08],
        seed: 2,
        ..Default::default()
    };
    let (a, curve) = train_supervised(&data, &spec, &cfg).unwrap();
    let (b, _) = train_supervised(&data, &spec, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(curve.len(), 6);
    let init = dataset_loss(&NetworkParams::init(&spec, 2).unwrap(), &data, &cfg.level_weights).unwrap();
    let after = dataset_loss(&a, &data, &cfg.level_weights).unwrap();
    assert!(after < init, "{after} >= {init}");
}

#[test]
fn misconfigured_training_is_rejected() {
    let spec = small_spec(Family::EncoderDecoder);
    let cfg = TrainConfig::default();
    // four weights for a two-level network
    assert!(matches!(train_supervised(&[], &spec, &cfg), Err(crate::Error::Config(_))));
}
