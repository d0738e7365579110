use crate::error::Result;
use crate::flow::FlowField;
use crate::tensor::{Graph, Real, Shape, Tensor, Var};
use crate::zero_flow::scores;

use super::{BoundParams, Family, LayerDef, NetworkSpec};

/// Flow maps recorded on a graph; `per_level` runs coarse to fine, each in
/// pixel units of its own resolution.
#[derive(Clone, Debug)]
pub struct FlowVars {
    pub final_flow: Var,
    pub per_level: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct FlowOutput {
    pub final_flow: FlowField,
    pub per_level: Vec<FlowField>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Encoder,
    Decoder,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Encoder => "encoder",
            Stage::Decoder => "decoder",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TraceEntry {
    pub layer: String,
    pub stage: Stage,
    pub shape: Shape,
    pub mean_norm: f64,
    pub spatial_std_ratio: f64,
    pub checkerboard: Option<f64>,
    /// Channel mean, box-downsampled.
    pub thumbnail: Tensor,
}

/// Per-layer activation statistics of batch item 0, in evaluation order.
#[derive(Clone, Debug, Default)]
pub struct FeatureTrace {
    pub entries: Vec<TraceEntry>,
}

impl FeatureTrace {
    fn record<T: Real>(&mut self, g: &Graph<T>, layer: &str, stage: Stage, v: Var) {
        let map: Tensor = g.value(v).batch_item(0).cast();
        self.entries.push(TraceEntry {
            layer: layer.to_string(),
            stage,
            shape: map.shape(),
            mean_norm: scores::mean_norm(&map),
            spatial_std_ratio: scores::spatial_invariance_score(&map),
            checkerboard: scores::checkerboard_score(&map),
            thumbnail: scores::thumbnail(&map, 32),
        });
    }
}

struct Tracer<'a>(Option<&'a mut FeatureTrace>);

impl Tracer<'_> {
    fn at<T: Real>(&mut self, g: &Graph<T>, layer: &str, stage: Stage, v: Var) {
        if let Some(t) = self.0.as_deref_mut() {
            t.record(g, layer, stage, v);
        }
    }
}

fn corr_channels(spec: &NetworkSpec) -> usize {
    (2 * spec.max_disp + 1).pow(2)
}

/// Encoder channels at level `k` (resolution `1 / 2^k`).
fn ed_channels(b: usize, k: usize) -> usize {
    match k {
        1 => b,
        2 => 2 * b,
        _ => 4 * b,
    }
}

fn ed_deconv_channels(b: usize, k: usize) -> usize {
    if k <= 2 {
        b
    } else {
        2 * b
    }
}

pub(super) fn ed_layers(spec: &NetworkSpec) -> Vec<LayerDef> {
    let (b, l) = (spec.base_channels, spec.levels);
    let mut v = vec![
        LayerDef::conv("conv1", 3, b, 3, 2),
        LayerDef::conv("conv1_1", b, b, 3, 1),
        LayerDef::conv("conv_redir", b, b, 1, 1),
    ];
    let mut c_in = corr_channels(spec) + b;
    for k in 2..=l {
        v.push(LayerDef::conv(format!("conv{k}"), c_in, ed_channels(b, k), 3, 2));
        c_in = ed_channels(b, k);
    }
    v.push(LayerDef::conv(format!("conv{l}_1"), c_in, c_in, 3, 1));
    v.push(LayerDef::conv(format!("predict_flow{l}"), c_in, 2, 3, 1));
    for k in (1..l).rev() {
        let dc = ed_deconv_channels(b, k);
        v.push(LayerDef::deconv(format!("deconv{k}"), c_in, dc));
        v.push(LayerDef::deconv(format!("upflow{k}"), 2, 2));
        c_in = ed_channels(b, k) + dc + 2;
        v.push(LayerDef::conv(format!("predict_flow{k}"), c_in, 2, 3, 1));
    }
    v
}

fn sp_hidden(spec: &NetworkSpec) -> usize {
    spec.base_channels * 3 / 2
}

pub(super) fn sp_layers(spec: &NetworkSpec) -> Vec<LayerDef> {
    let b = spec.base_channels;
    let h = sp_hidden(spec);
    let mut v = vec![LayerDef::conv("feat1", 3, b, 3, 1), LayerDef::conv("feat2", b, b, 3, 1)];
    for k in (1..=spec.levels).rev() {
        v.push(LayerDef::conv(format!("est{k}_1"), corr_channels(spec) + b + 2, h, 3, 1));
        v.push(LayerDef::conv(format!("est{k}_2"), h, h / 2, 3, 1));
        v.push(LayerDef::conv(format!("est{k}_3"), h / 2, 2, 3, 1));
    }
    v
}

pub(super) fn forward<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    i1: Var,
    i2: Var,
    trace: Option<&mut FeatureTrace>,
) -> Result<FlowVars> {
    let mut tr = Tracer(trace);
    // Centre pixel values so features respond to texture rather than brightness.
    let i1 = g.add_scalar(i1, -0.5)?;
    let i2 = g.add_scalar(i2, -0.5)?;
    let levels = match p.spec.family {
        Family::EncoderDecoder => ed_forward(g, p, i1, i2, &mut tr)?,
        Family::SpatialPyramid => sp_forward(g, p, i1, i2, &mut tr)?,
    };
    let finest = *levels.last().expect("at least two levels");
    let up = g.upsample2(finest)?;
    let final_flow = g.scale(up, 2.0)?;
    Ok(FlowVars {
        final_flow,
        per_level: levels,
    })
}

fn ed_forward<T: Real>(g: &mut Graph<T>, p: &BoundParams, i1: Var, i2: Var, tr: &mut Tracer) -> Result<Vec<Var>> {
    let l = p.spec.levels;
    let a = p.apply_act(g, "conv1", i1)?;
    let b = p.apply_act(g, "conv1", i2)?;
    tr.at(g, "conv1", Stage::Encoder, a);
    let a = p.apply_act(g, "conv1_1", a)?;
    let b = p.apply_act(g, "conv1_1", b)?;
    tr.at(g, "conv1_1", Stage::Encoder, a);
    let corr = g.local_correlation(a, b, p.spec.max_disp)?;
    let corr = g.leaky_relu(corr, p.slope)?;
    tr.at(g, "corr", Stage::Encoder, corr);
    let redir = p.apply_act(g, "conv_redir", a)?;
    let mut x = g.concat(&[corr, redir])?;

    let mut skips = vec![a];
    for k in 2..=l {
        let name = format!("conv{k}");
        x = p.apply_act(g, &name, x)?;
        tr.at(g, &name, Stage::Encoder, x);
        skips.push(x);
    }
    let name = format!("conv{l}_1");
    let deep = p.apply_act(g, &name, x)?;
    tr.at(g, &name, Stage::Encoder, deep);

    let mut flow = p.apply(g, &format!("predict_flow{l}"), deep)?;
    tr.at(g, &format!("flow{l}"), Stage::Decoder, flow);
    let mut levels = vec![flow];
    let mut feat = deep;
    for k in (1..l).rev() {
        let name = format!("deconv{k}");
        let up = p.apply_act(g, &name, feat)?;
        tr.at(g, &name, Stage::Decoder, up);
        let upflow = p.apply(g, &format!("upflow{k}"), flow)?;
        feat = g.concat(&[skips[k - 1], up, upflow])?;
        flow = p.apply(g, &format!("predict_flow{k}"), feat)?;
        tr.at(g, &format!("flow{k}"), Stage::Decoder, flow);
        levels.push(flow);
    }
    Ok(levels)
}

fn sp_forward<T: Real>(g: &mut Graph<T>, p: &BoundParams, i1: Var, i2: Var, tr: &mut Tracer) -> Result<Vec<Var>> {
    let l = p.spec.levels;
    let (mut pyr1, mut pyr2) = (Vec::with_capacity(l), Vec::with_capacity(l));
    let (mut x1, mut x2) = (i1, i2);
    for _ in 0..l {
        x1 = g.avg_pool2(x1)?;
        x2 = g.avg_pool2(x2)?;
        pyr1.push(x1);
        pyr2.push(x2);
    }

    let mut levels = Vec::with_capacity(l);
    let mut flow: Option<Var> = None;
    for k in (1..=l).rev() {
        let (img1, img2) = (pyr1[k - 1], pyr2[k - 1]);
        let f1 = p.apply_act(g, "feat1", img1)?;
        let f1 = p.apply_act(g, "feat2", f1)?;
        let f2 = p.apply_act(g, "feat1", img2)?;
        let f2 = p.apply_act(g, "feat2", f2)?;
        tr.at(g, &format!("feat{k}"), Stage::Encoder, f1);

        let (up, target) = match flow {
            Some(prev) => {
                let up = g.upsample2(prev)?;
                let up = g.scale(up, 2.0)?;
                let warped = g.bilinear_warp(f2, up)?;
                (up, warped)
            }
            None => {
                let s = g.shape(f1);
                let zero = g.constant(Tensor::zeros(Shape::new(s.n, 2, s.h, s.w)))?;
                (zero, f2)
            }
        };
        let corr = g.local_correlation(f1, target, p.spec.max_disp)?;
        let corr = g.leaky_relu(corr, p.slope)?;
        tr.at(g, &format!("corr{k}"), Stage::Encoder, corr);
        let x = g.concat(&[corr, f1, up])?;
        let name = format!("est{k}_1");
        let h = p.apply_act(g, &name, x)?;
        tr.at(g, &name, Stage::Decoder, h);
        let name = format!("est{k}_2");
        let h = p.apply_act(g, &name, h)?;
        tr.at(g, &name, Stage::Decoder, h);
        let residual = p.apply(g, &format!("est{k}_3"), h)?;
        let f = g.add(up, residual)?;
        tr.at(g, &format!("flow{k}"), Stage::Decoder, f);
        levels.push(f);
        flow = Some(f);
    }
    Ok(levels)
}
