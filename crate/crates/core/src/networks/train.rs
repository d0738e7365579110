//! Supervised multi-scale EPE training.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::synth::SamplePair;
use crate::tensor::{kernels, Graph, Shape, Tensor, Var};

use super::{Network, NetworkParams, NetworkSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Heavy-ball momentum SGD.
    Sgd,
    /// Adam with `momentum` as the first-moment decay and 0.999 for the second.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub optimizer: Optimizer,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Loss weight per pyramid level, finest first.
    pub level_weights: Vec<f32>,
    /// Global gradient-norm ceiling.
    pub grad_clip: Option<f32>,
    /// Epochs at whose start the learning rate is halved.
    pub lr_halving_epochs: Vec<usize>,
    /// Random training crop `[height, width]`; sides must be multiples of `2^levels`.
    pub crop: Option<[usize; 2]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 1e-3,
            optimizer: Optimizer::Adam,
            momentum: 0.9,
            batch_size: 4,
            seed: 0,
            level_weights: vec![0.32, 0.08, 0.02, 0.01],
            grad_clip: Some(10.0),
            lr_halving_epochs: vec![20, 26],
            crop: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainPoint {
    pub epoch: usize,
    pub step: usize,
    pub lr: f32,
    pub loss: f64,
}

/// Ground truth and validity at every pyramid level, finest first.
struct Prepared {
    i1: Tensor,
    i2: Tensor,
    gt: Vec<Tensor>,
    mask: Vec<Tensor>,
}

fn pool(t: &Tensor) -> Tensor {
    let (data, shape) = kernels::avg_pool2(t.data(), t.shape());
    Tensor::new(shape, data).expect("pool output matches its shape")
}

fn prepare(p: &SamplePair, levels: usize) -> Prepared {
    let (mut gt, mut mask) = (Vec::with_capacity(levels), Vec::with_capacity(levels));
    let (mut g, mut m) = (p.gt_flow.tensor().clone(), p.valid.clone());
    for k in 1..=levels {
        g = pool(&g);
        m = pool(&m);
        let mut scaled = g.clone();
        let s = 1.0 / (1u32 << k) as f32;
        scaled.data_mut().iter_mut().for_each(|v| *v *= s);
        gt.push(scaled);
        mask.push(m.clone());
    }
    Prepared {
        i1: p.i1.clone(),
        i2: p.i2.clone(),
        gt,
        mask,
    }
}

fn crop(t: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Tensor {
    let s = t.shape();
    Tensor::from_fn(Shape::new(1, s.c, h, w), |_, c, y, x| t.at(0, c, y0 + y, x0 + x))
}

fn stack(items: &[Tensor]) -> Tensor {
    let s = items[0].shape();
    let mut data = Vec::with_capacity(s.numel() * items.len());
    for t in items {
        data.extend_from_slice(t.data());
    }
    Tensor::new(Shape::new(items.len(), s.c, s.h, s.w), data).expect("stacked shapes agree")
}

/// A batch cut from prepared samples, optionally cropped at `2^levels`-aligned offsets.
struct Batch {
    i1: Tensor,
    i2: Tensor,
    gt: Vec<Tensor>,
    mask: Vec<Tensor>,
}

fn make_batch(items: &[&Prepared], window: Option<(Vec<(usize, usize)>, usize, usize)>) -> Batch {
    let levels = items[0].gt.len();
    let cut = |t: &Tensor, i: usize, scale: usize| match &window {
        Some((offs, h, w)) => crop(t, offs[i].0 / scale, offs[i].1 / scale, h / scale, w / scale),
        None => t.clone(),
    };
    let frames = |f: &dyn Fn(&Prepared) -> &Tensor| {
        stack(&items.iter().enumerate().map(|(i, p)| cut(f(p), i, 1)).collect::<Vec<_>>())
    };
    let per_level = |f: &dyn Fn(&Prepared, usize) -> &Tensor| {
        (0..levels)
            .map(|k| {
                let parts: Vec<Tensor> = items
                    .iter()
                    .enumerate()
                    .map(|(i, p)| cut(f(p, k), i, 1 << (k + 1)))
                    .collect();
                stack(&parts)
            })
            .collect()
    };
    Batch {
        i1: frames(&|p| &p.i1),
        i2: frames(&|p| &p.i2),
        gt: per_level(&|p, k| &p.gt[k]),
        mask: per_level(&|p, k| &p.mask[k]),
    }
}

fn multiscale_loss(g: &mut Graph, per_level: &[Var], batch: &Batch, weights: &[f32]) -> Result<Var> {
    let levels = per_level.len();
    let mut total: Option<Var> = None;
    for (k, &w) in weights.iter().enumerate() {
        let mask: Vec<f64> = batch.mask[k].data().iter().map(|&v| v as f64).collect();
        if w == 0.0 || mask.iter().sum::<f64>() <= 0.0 {
            continue;
        }
        let gt = g.constant(batch.gt[k].clone())?;
        let e = g.epe_map(per_level[levels - 1 - k], gt)?;
        let m = g.weighted_mean(e, Arc::new(mask))?;
        let term = g.scale(m, w as f64)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Usage("no valid pixels in batch".into()))
}

fn check_config(spec: &NetworkSpec, cfg: &TrainConfig) -> Result<()> {
    spec.validate()?;
    if cfg.level_weights.len() != spec.levels {
        return Err(config_err!(
            "{} level weights given for a {}-level network",
            cfg.level_weights.len(),
            spec.levels
        ));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(config_err!(
            "batch_size must be positive, lr positive and momentum in [0, 1); got {}, {}, {}",
            cfg.batch_size,
            cfg.lr,
            cfg.momentum
        ));
    }
    if let Some([h, w]) = cfg.crop {
        spec.check_input(Shape::new(1, 3, h, w))?;
    }
    Ok(())
}

/// Mean multi-scale loss of `params` over `data`, without gradients.
pub fn dataset_loss(params: &NetworkParams, data: &[SamplePair], level_weights: &[f32]) -> Result<f64> {
    if data.is_empty() {
        return Err(config_err!("empty dataset"));
    }
    let net = Network::new("eval", params.clone());
    let mut acc = 0.0;
    for p in data {
        let prep = prepare(p, params.spec.levels);
        let batch = make_batch(&[&prep], None);
        let mut g = Graph::<f32>::new();
        let bound = params.bind(&mut g, false)?;
        let a = g.constant(batch.i1.clone())?;
        let b = g.constant(batch.i2.clone())?;
        let fv = net.forward_graph(&mut g, &bound, a, b, None)?;
        let l = multiscale_loss(&mut g, &fv.per_level, &batch, level_weights)?;
        acc += g.item(l) as f64;
    }
    Ok(acc / data.len() as f64)
}

/// Trains a freshly initialised network on `data`.
///
/// Returns the parameters and one curve point per optimizer step. A
/// non-finite loss aborts with the last finite parameters attached.
pub fn train_supervised(
    data: &[SamplePair],
    spec: &NetworkSpec,
    cfg: &TrainConfig,
) -> Result<(NetworkParams, Vec<TrainPoint>)> {
    train_from(data, spec, cfg, None)
}

/// Like [`train_supervised`] but continues from `init` when given.
pub fn train_from(
    data: &[SamplePair],
    spec: &NetworkSpec,
    cfg: &TrainConfig,
    init: Option<NetworkParams>,
) -> Result<(NetworkParams, Vec<TrainPoint>)> {
    check_config(spec, cfg)?;
    let mut params = match init {
        Some(p) if &p.spec == spec => p,
        Some(p) => return Err(config_err!("initial parameters are for {:?}, not {:?}", p.spec, spec)),
        None => NetworkParams::init(spec, cfg.seed)?,
    };
    let mut curve = Vec::new();
    if cfg.epochs == 0 {
        return Ok((params, curve));
    }
    if data.is_empty() {
        return Err(config_err!("training needs at least one sample"));
    }
    for p in data {
        spec.check_input(p.i1.shape())?;
        if let Some([h, w]) = cfg.crop {
            if h > p.height() || w > p.width() {
                return Err(config_err!("crop {h}x{w} exceeds sample {}x{}", p.height(), p.width()));
            }
        }
    }
    let prepared: Vec<Prepared> = data.iter().map(|p| prepare(p, spec.levels)).collect();
    let net = Network::new("train", params.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_7A1E);
    let zeros_like = |p: &NetworkParams| -> Vec<Vec<f32>> {
        p.layers
            .iter()
            .flat_map(|l| [vec![0.0; l.kernel.data().len()], vec![0.0; l.bias.data().len()]])
            .collect()
    };
    let mut first = zeros_like(&params);
    let mut second = zeros_like(&params);
    let align = 1usize << spec.levels;
    let mut lr = cfg.lr;
    let mut step = 0;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 0..cfg.epochs {
        if cfg.lr_halving_epochs.contains(&epoch) {
            lr *= 0.5;
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&Prepared> = chunk.iter().map(|&i| &prepared[i]).collect();
            let window = cfg.crop.map(|[h, w]| {
                let offs = items
                    .iter()
                    .map(|p| {
                        let s = p.i1.shape();
                        let oy = rng.random_range(0..=(s.h - h) / align) * align;
                        let ox = rng.random_range(0..=(s.w - w) / align) * align;
                        (oy, ox)
                    })
                    .collect();
                (offs, h, w)
            });
            let batch = make_batch(&items, window);

            let mut g = Graph::<f32>::new();
            let bound = params.bind(&mut g, true)?;
            let diverged = |params: &NetworkParams| Error::Diverged {
                step,
                checkpoint: Box::new(params.clone()),
            };
            let a = g.constant(batch.i1.clone())?;
            let b = g.constant(batch.i2.clone())?;
            let loss = net
                .forward_graph(&mut g, &bound, a, b, None)
                .and_then(|fv| multiscale_loss(&mut g, &fv.per_level, &batch, &cfg.level_weights));
            let loss = match loss {
                Ok(l) => l,
                Err(Error::NonFinite { .. }) => return Err(diverged(&params)),
                Err(e) => return Err(e),
            };
            let loss_value = g.item(loss) as f64;
            g.backward(loss)?;

            let grads: Vec<(&[f32], &[f32])> = bound
                .vars()
                .iter()
                .map(|&(k, b)| (g.grad(k).expect("trainable"), g.grad(b).expect("trainable")))
                .collect();
            let norm: f64 = grads
                .iter()
                .flat_map(|(k, b)| k.iter().chain(b.iter()))
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(diverged(&params));
            }
            let clip = match cfg.grad_clip {
                Some(c) if norm > c as f64 => (c as f64 / norm) as f32,
                _ => 1.0,
            };
            let slots = params
                .layers
                .iter_mut()
                .flat_map(|l| [l.kernel.data_mut(), l.bias.data_mut()])
                .zip(grads.iter().flat_map(|&(k, b)| [k, b]));
            let t = (step + 1) as i32;
            for ((values, grad), (m, v)) in slots.zip(first.iter_mut().zip(second.iter_mut())) {
                for (i, (p, &gv)) in values.iter_mut().zip(grad).enumerate() {
                    let gv = clip * gv;
                    match cfg.optimizer {
                        Optimizer::Sgd => {
                            m[i] = cfg.momentum * m[i] + gv;
                            *p -= lr * m[i];
                        }
                        Optimizer::Adam => {
                            m[i] = cfg.momentum * m[i] + (1.0 - cfg.momentum) * gv;
                            v[i] = 0.999 * v[i] + 0.001 * gv * gv;
                            let mh = m[i] / (1.0 - cfg.momentum.powi(t));
                            let vh = v[i] / (1.0 - 0.999f32.powi(t));
                            *p -= lr * mh / (vh.sqrt() + 1e-8);
                        }
                    }
                }
            }
            curve.push(TrainPoint {
                epoch,
                step,
                lr,
                loss: loss_value,
            });
            step += 1;
        }
    }
    Ok((params, curve))
}
