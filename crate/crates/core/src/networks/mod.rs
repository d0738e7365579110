//! Miniature encoder-decoder and spatial-pyramid flow networks.

mod arch;
mod io;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::flow::FlowField;
use crate::tensor::{Graph, Real, Shape, Tensor, Var};

pub use arch::{FeatureTrace, FlowOutput, FlowVars, Stage, TraceEntry};
pub use io::{read_params, write_params};
pub use train::{dataset_loss, train_from, train_supervised, Optimizer, TrainConfig, TrainPoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    EncoderDecoder,
    SpatialPyramid,
}

impl Family {
    pub fn short_name(self) -> &'static str {
        match self {
            Family::EncoderDecoder => "ed",
            Family::SpatialPyramid => "sp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub family: Family,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_base")]
    pub base_channels: usize,
    #[serde(default = "default_disp")]
    pub max_disp: usize,
    #[serde(default = "default_slope")]
    pub leaky_slope: f32,
}

fn default_levels() -> usize {
    4
}
fn default_base() -> usize {
    16
}
fn default_disp() -> usize {
    3
}
fn default_slope() -> f32 {
    0.1
}

impl NetworkSpec {
    pub fn new(family: Family) -> Self {
        NetworkSpec {
            family,
            levels: default_levels(),
            base_channels: default_base(),
            max_disp: default_disp(),
            leaky_slope: default_slope(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 || self.levels > 8 {
            return Err(config_err!("levels must be in 2..=8, got {}", self.levels));
        }
        if self.base_channels < 4 {
            return Err(config_err!("base_channels must be at least 4, got {}", self.base_channels));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(config_err!("leaky_slope must be in [0, 1), got {}", self.leaky_slope));
        }
        Ok(())
    }

    /// Input sides must be multiples of `2^levels`.
    pub fn check_input(&self, shape: Shape) -> Result<()> {
        let m = 1usize << self.levels;
        if shape.c != 3 || shape.h == 0 || shape.w == 0 || shape.h % m != 0 || shape.w % m != 0 {
            return Err(config_err!(
                "input {shape} must have 3 channels and sides divisible by {m}"
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum LayerKind {
    Conv,
    Deconv,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerDef {
    pub name: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl LayerDef {
    fn conv(name: impl Into<String>, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        LayerDef {
            name: name.into(),
            kind: LayerKind::Conv,
            c_in,
            c_out,
            k,
            stride,
            pad: k / 2,
        }
    }

    fn deconv(name: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        LayerDef {
            name: name.into(),
            kind: LayerKind::Deconv,
            c_in,
            c_out,
            k: 4,
            stride: 2,
            pad: 1,
        }
    }

    pub fn kernel_shape(&self) -> Shape {
        match self.kind {
            LayerKind::Conv => Shape::new(self.c_out, self.c_in, self.k, self.k),
            LayerKind::Deconv => Shape::new(self.c_in, self.c_out, self.k, self.k),
        }
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.c_out, 1, 1)
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv => self.c_in * self.k * self.k,
            LayerKind::Deconv => (self.c_in * self.k * self.k / (self.stride * self.stride)).max(1),
        }
    }
}

/// Layer list of a network in evaluation order.
pub(crate) fn architecture(spec: &NetworkSpec) -> Vec<LayerDef> {
    match spec.family {
        Family::EncoderDecoder => arch::ed_layers(spec),
        Family::SpatialPyramid => arch::sp_layers(spec),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub spec: NetworkSpec,
    pub seed: u64,
    pub layers: Vec<Layer>,
}

impl NetworkParams {
    /// He-uniform kernels (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = architecture(spec)
            .into_iter()
            .map(|d| {
                let bound = (6.0 / d.fan_in() as f32).sqrt();
                Layer {
                    kernel: Tensor::from_fn(d.kernel_shape(), |_, _, _, _| rng.random_range(-bound..=bound)),
                    bias: Tensor::zeros(d.bias_shape()),
                    name: d.name,
                }
            })
            .collect();
        Ok(NetworkParams {
            spec: spec.clone(),
            seed,
            layers,
        })
    }

    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layers = architecture(spec)
            .into_iter()
            .map(|d| Layer {
                kernel: Tensor::zeros(d.kernel_shape()),
                bias: Tensor::zeros(d.bias_shape()),
                name: d.name,
            })
            .collect();
        Ok(NetworkParams {
            spec: spec.clone(),
            seed: 0,
            layers,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.kernel.shape().numel() + l.bias.shape().numel())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.kernel.is_finite() && l.bias.is_finite())
    }

    /// Checks that the layer set matches the spec's architecture exactly.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let defs = architecture(&self.spec);
        if defs.len() != self.layers.len() {
            return Err(config_err!(
                "expected {} layers for {:?}, found {}",
                defs.len(),
                self.spec.family,
                self.layers.len()
            ));
        }
        for (d, l) in defs.iter().zip(&self.layers) {
            if d.name != l.name || d.kernel_shape() != l.kernel.shape() || d.bias_shape() != l.bias.shape() {
                return Err(config_err!(
                    "layer {} ({}, {}) does not match architecture layer {} ({}, {})",
                    l.name,
                    l.kernel.shape(),
                    l.bias.shape(),
                    d.name,
                    d.kernel_shape(),
                    d.bias_shape()
                ));
            }
        }
        if !self.is_finite() {
            return Err(crate::Error::NonFinite { op: "params" });
        }
        Ok(())
    }

    /// Places every kernel and bias on `g`, trainable or frozen.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Result<BoundParams> {
        let vars = self
            .layers
            .iter()
            .map(|l| Ok((g.leaf(l.kernel.cast(), trainable)?, g.leaf(l.bias.cast(), trainable)?)))
            .collect::<Result<_>>()?;
        Ok(BoundParams {
            defs: architecture(&self.spec),
            vars,
            slope: self.spec.leaky_slope as f64,
            spec: self.spec.clone(),
        })
    }
}

/// Parameters placed on a particular graph.
pub struct BoundParams {
    defs: Vec<LayerDef>,
    vars: Vec<(Var, Var)>,
    slope: f64,
    spec: NetworkSpec,
}

impl BoundParams {
    pub fn vars(&self) -> &[(Var, Var)] {
        &self.vars
    }

    fn index(&self, name: &str) -> usize {
        self.defs
            .iter()
            .position(|d| d.name == name)
            .unwrap_or_else(|| panic!("layer {name} missing from architecture"))
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let i = self.index(name);
        let d = &self.defs[i];
        let (k, b) = self.vars[i];
        match d.kind {
            LayerKind::Conv => g.conv2d(x, k, Some(b), d.stride, d.pad),
            LayerKind::Deconv => g.conv_transpose2d(x, k, Some(b), d.stride, d.pad),
        }
    }

    fn apply_act<T: Real>(&self, g: &mut Graph<T>, name: &str, x: Var) -> Result<Var> {
        let y = self.apply(g, name, x)?;
        g.leaky_relu(y, self.slope)
    }
}

/// A named, trained network usable as a flow estimator.
#[derive(Clone, Debug)]
pub struct Network {
    pub name: String,
    pub params: NetworkParams,
}

impl Network {
    pub fn new(name: impl Into<String>, params: NetworkParams) -> Self {
        Network {
            name: name.into(),
            params,
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.params.spec
    }

    /// Records the forward pass of `(i1, i2)` on `g`.
    pub fn forward_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        i1: Var,
        i2: Var,
        trace: Option<&mut FeatureTrace>,
    ) -> Result<FlowVars> {
        self.params.spec.check_input(g.shape(i1))?;
        if g.shape(i1) != g.shape(i2) {
            return Err(config_err!("frame shapes differ: {} vs {}", g.shape(i1), g.shape(i2)));
        }
        arch::forward(g, bound, i1, i2, trace)
    }

    /// Flow for a single image pair, optionally with a per-layer trace.
    pub fn predict(&self, i1: &Tensor, i2: &Tensor, trace: bool) -> Result<(FlowOutput, Option<FeatureTrace>)> {
        let mut g = Graph::<f32>::new();
        let bound = self.params.bind(&mut g, false)?;
        let a = g.constant(i1.clone())?;
        let b = g.constant(i2.clone())?;
        let mut tr = trace.then(FeatureTrace::default);
        let vars = self.forward_graph(&mut g, &bound, a, b, tr.as_mut())?;
        let field = |v: Var| FlowField::new(g.value(v).batch_item(0));
        let out = FlowOutput {
            final_flow: field(vars.final_flow)?,
            per_level: vars.per_level.iter().map(|&v| field(v)).collect::<Result<_>>()?,
        };
        Ok((out, tr))
    }
}

/// Anything that maps an image pair to a flow field.
pub trait FlowMethod: Sync {
    fn name(&self) -> &str;

    fn estimate(&self, i1: &Tensor, i2: &Tensor) -> Result<FlowField>;

    /// The underlying network, when the method is differentiable.
    fn network(&self) -> Option<&Network> {
        None
    }
}

impl FlowMethod for Network {
    fn name(&self) -> &str {
        &self.name
    }

    fn estimate(&self, i1: &Tensor, i2: &Tensor) -> Result<FlowField> {
        Ok(self.predict(i1, i2, false)?.0.final_flow)
    }

    fn network(&self) -> Option<&Network> {
        Some(self)
    }
}

#[cfg(test)]
mod tests;
