//! Patch optimization against one or several frozen flow networks.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::flow::FlowField;
use crate::networks::Network;
use crate::patch::{sample_transform, PasteMap, Patch, TransformRanges};
use crate::synth::SamplePair;
use crate::tensor::{Graph, Shape, Tensor};

/// Added to the norm product in the cosine denominator.
pub const COSINE_EPS: f64 = 1e-8;
/// Reference vectors shorter than this contribute 0 to the cosine loss.
pub const MIN_REFERENCE_NORM: f64 = 1e-6;
/// Consecutive non-finite steps tolerated before giving up.
pub const MAX_FAILURES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// Side of the square patch in pixels.
    pub patch_size: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Steps at whose start the learning rate is halved.
    pub lr_halving_steps: Vec<usize>,
    pub ranges: TransformRanges,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            patch_size: 16,
            steps: 2000,
            batch: 4,
            lr: 100.0,
            lr_halving_steps: Vec::new(),
            ranges: TransformRanges::default(),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, image_dims: (usize, usize)) -> Result<()> {
        self.ranges.validate()?;
        if self.patch_size == 0 || self.batch == 0 {
            return Err(config_err!("patch_size ({}) and batch ({}) must be positive", self.patch_size, self.batch));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("lr must be positive, got {}", self.lr));
        }
        let side = self.ranges.scale[1] * self.patch_size as f64;
        if side > image_dims.0 as f64 || side > image_dims.1 as f64 {
            return Err(config_err!(
                "a {0}x{0} patch at scale {1} does not fit {2}x{3} images",
                self.patch_size,
                self.ranges.scale[1],
                image_dims.0,
                image_dims.1
            ));
        }
        Ok(())
    }

    /// Patch area as a percentage of an `h x w` image.
    pub fn patch_area_pct(&self, image_dims: (usize, usize)) -> f64 {
        100.0 * (self.patch_size * self.patch_size) as f64 / (image_dims.0 * image_dims.1) as f64
    }
}

/// Mean per-pixel cosine between a clean and an attacked flow.
pub fn cosine_loss(clean: &FlowField, attacked: &FlowField) -> Result<f64> {
    if (clean.height(), clean.width()) != (attacked.height(), attacked.width()) {
        return Err(config_err!(
            "cosine_loss: {}x{} vs {}x{}",
            clean.height(),
            clean.width(),
            attacked.height(),
            attacked.width()
        ));
    }
    let n = clean.u().len();
    let mut acc = 0.0;
    for p in 0..n {
        let (ru, rv) = (f64::from(clean.u()[p]), f64::from(clean.v()[p]));
        let (au, av) = (f64::from(attacked.u()[p]), f64::from(attacked.v()[p]));
        let rn = ru.hypot(rv);
        if rn >= MIN_REFERENCE_NORM {
            acc += (au * ru + av * rv) / (au.hypot(av) * rn + COSINE_EPS);
        }
    }
    Ok(acc / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackPoint {
    pub step: usize,
    pub lr: f64,
    /// Summed over targets; `None` for a skipped non-finite step.
    pub loss: Option<f64>,
    pub per_target: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AttackOutcome {
    /// The patch with the lowest batch loss seen (the initialization if `steps = 0`).
    pub patch: Patch,
    pub best_step: Option<usize>,
    pub best_loss: Option<f64>,
    pub curve: Vec<AttackPoint>,
    pub target_names: Vec<String>,
}

impl AttackOutcome {
    /// `step,lr,loss,<target>...`; skipped steps leave the loss cells empty.
    pub fn write_curve_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("step,lr,loss");
        for name in &self.target_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for p in &self.curve {
            out.push_str(&format!("{},{}", p.step, p.lr));
            match p.loss {
                Some(l) => {
                    out.push_str(&format!(",{l}"));
                    for v in &p.per_target {
                        out.push_str(&format!(",{v}"));
                    }
                }
                None => out.push_str(&",".repeat(1 + self.target_names.len())),
            }
            out.push('\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Clean predictions used as fixed labels, one per (target, sample).
pub fn pseudo_labels(net: &Network, data: &[SamplePair]) -> Result<Vec<FlowField>> {
    data.par_iter()
        .map(|p| Ok(net.predict(&p.i1, &p.i2, false)?.0.final_flow))
        .collect()
}

/// Patch attacking a single network.
pub fn white_box_attack(net: &Network, data: &[SamplePair], cfg: &AttackConfig) -> Result<AttackOutcome> {
    run_attack(&[net], data, cfg)
}

/// Universal patch minimizing the summed cosine over all `nets`.
pub fn black_box_attack(nets: &[&Network], data: &[SamplePair], cfg: &AttackConfig) -> Result<AttackOutcome> {
    if nets.len() < 2 {
        return Err(Error::Usage(format!(
            "a joint attack needs at least two target networks, got {}; use a white-box attack for one",
            nets.len()
        )));
    }
    run_attack(nets, data, cfg)
}

struct ElementResult {
    per_target: Vec<f64>,
    grad: Vec<f32>,
}

/// Loss and patch gradient for one pasted pair against every target.
fn element(
    nets: &[&Network],
    pair: &SamplePair,
    labels: &[&FlowField],
    map: &PasteMap,
    patch: &Tensor,
) -> Result<ElementResult> {
    let mut per_target = Vec::with_capacity(nets.len());
    let mut grad = vec![0.0f32; patch.data().len()];
    for (net, label) in nets.iter().zip(labels) {
        let mut g = Graph::<f32>::new();
        let bound = net.params.bind(&mut g, false)?;
        let p = g.leaf(patch.clone(), true)?;
        let i1 = g.constant(pair.i1.clone())?;
        let i2 = g.constant(pair.i2.clone())?;
        let a1 = map.apply_var(&mut g, i1, p)?;
        let a2 = map.apply_var(&mut g, i2, p)?;
        let out = net.forward_graph(&mut g, &bound, a1, a2, None)?;
        let reference = g.constant(label.tensor().clone())?;
        let cos = g.cosine_map(out.final_flow, reference, COSINE_EPS, MIN_REFERENCE_NORM)?;
        let loss = g.mean(cos)?;
        per_target.push(f64::from(g.item(loss)));
        g.backward(loss)?;
        for (acc, v) in grad.iter_mut().zip(g.grad(p).expect("patch requires grad")) {
            *acc += v;
        }
    }
    Ok(ElementResult { per_target, grad })
}

fn run_attack(nets: &[&Network], data: &[SamplePair], cfg: &AttackConfig) -> Result<AttackOutcome> {
    if nets.is_empty() {
        return Err(Error::Usage("no target networks".into()));
    }
    let first = data.first().ok_or_else(|| config_err!("attack dataset is empty"))?;
    let dims = (first.height(), first.width());
    if data.iter().any(|p| (p.height(), p.width()) != dims) {
        return Err(config_err!("attack dataset mixes image sizes"));
    }
    cfg.validate(dims)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.patch_size;
    let mut patch = Patch::new(Tensor::from_fn(Shape::new(1, 3, s, s), |_, _, _, _| rng.random()))?;
    let target_names = nets.iter().map(|n| n.name.clone()).collect();
    let mut outcome = AttackOutcome {
        patch: patch.clone(),
        best_step: None,
        best_loss: None,
        curve: Vec::with_capacity(cfg.steps),
        target_names,
    };
    if cfg.steps == 0 {
        return Ok(outcome);
    }
    let labels = nets
        .iter()
        .map(|n| pseudo_labels(n, data))
        .collect::<Result<Vec<_>>>()?;

    let mut lr = cfg.lr;
    let mut failures = 0;
    for step in 0..cfg.steps {
        if cfg.lr_halving_steps.contains(&step) {
            lr *= 0.5;
        }
        let picks: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..data.len())).collect();
        let placements = picks
            .iter()
            .map(|_| sample_transform(&mut rng, dims, (s, s), &cfg.ranges))
            .collect::<Result<Vec<_>>>()?;
        let pixels = patch.pixels().clone();
        let results: Vec<Result<ElementResult>> = picks
            .par_iter()
            .zip(&placements)
            .map(|(&i, t)| {
                let map = PasteMap::new(&patch, dims, t)?;
                let lab: Vec<&FlowField> = labels.iter().map(|l| &l[i]).collect();
                element(nets, &data[i], &lab, &map, &pixels)
            })
            .collect();

        // Reduction in batch order keeps the sum deterministic.
        let mut grad = vec![0.0f32; pixels.data().len()];
        let mut per_target = vec![0.0; nets.len()];
        let mut finite = true;
        for r in results {
            match r {
                Ok(e) => {
                    for (a, v) in grad.iter_mut().zip(&e.grad) {
                        *a += v / cfg.batch as f32;
                    }
                    for (a, v) in per_target.iter_mut().zip(&e.per_target) {
                        *a += v / cfg.batch as f64;
                    }
                }
                Err(Error::NonFinite { .. }) => finite = false,
                Err(e) => return Err(e),
            }
        }
        let loss: f64 = per_target.iter().sum();
        if !finite || !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            failures += 1;
            outcome.curve.push(AttackPoint {
                step,
                lr,
                loss: None,
                per_target: Vec::new(),
            });
            lr *= 0.5;
            if failures >= MAX_FAILURES {
                return Err(Error::AttackAborted { failures });
            }
            continue;
        }
        failures = 0;
        if outcome.best_loss.is_none_or(|b| loss < b) {
            outcome.best_loss = Some(loss);
            outcome.best_step = Some(step);
            outcome.patch = patch.clone();
        }
        outcome.curve.push(AttackPoint {
            step,
            lr,
            loss: Some(loss),
            per_target,
        });
        let stepped: Vec<f32> = pixels
            .data()
            .iter()
            .zip(&grad)
            .map(|(p, g)| p - (lr as f32) * g)
            .collect();
        patch.set_pixels(Tensor::new(pixels.shape(), stepped)?)?;
    }
    Ok(outcome)
}
