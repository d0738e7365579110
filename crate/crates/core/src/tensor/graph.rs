use std::sync::Arc;

use super::kernels;
use super::{Real, Shape, Tensor};
use crate::error::{config_err, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Sparse linear paste: each listed destination pixel of `base` is replaced by
/// a weighted sum of source pixels, identically in every channel.
///
/// Destinations not listed pass `base` through untouched.
#[derive(Clone, Debug, Default)]
pub struct CompositeMap {
    pub dst_dims: (usize, usize),
    pub src_dims: (usize, usize),
    /// `(dst pixel, taps range)` into `taps`.
    entries: Vec<(usize, std::ops::Range<usize>)>,
    taps: Vec<(usize, f64)>,
}

impl CompositeMap {
    pub fn new(dst_dims: (usize, usize), src_dims: (usize, usize)) -> Self {
        CompositeMap {
            dst_dims,
            src_dims,
            entries: Vec::new(),
            taps: Vec::new(),
        }
    }

    /// Adds a destination pixel (`y * w + x`) fed by `(src pixel, weight)` taps.
    pub fn push(&mut self, dst: usize, taps: impl IntoIterator<Item = (usize, f64)>) {
        let start = self.taps.len();
        self.taps.extend(taps);
        self.entries.push((dst, start..self.taps.len()));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Destination pixels written by the map.
    pub fn destinations(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|(d, _)| *d)
    }

    /// Source pixels read by the map.
    pub fn sources(&self) -> impl Iterator<Item = usize> + '_ {
        self.taps.iter().map(|(s, _)| *s)
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, &[(usize, f64)])> + '_ {
        self.entries
            .iter()
            .map(|(d, r)| (*d, &self.taps[r.clone()]))
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: usize,
        k: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: usize,
        k: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    LeakyRelu {
        x: usize,
        slope: f64,
    },
    Warp {
        img: usize,
        flow: usize,
    },
    Correlation {
        f1: usize,
        f2: usize,
        max_disp: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale {
        x: usize,
        s: f64,
    },
    AddScalar {
        x: usize,
    },
    Concat(Vec<usize>),
    AvgPool2(usize),
    Upsample2(usize),
    Sum(usize),
    Mean(usize),
    EpeMap {
        a: usize,
        b: usize,
    },
    CosineMap {
        att: usize,
        reference: usize,
        eps: f64,
        min_ref_norm: f64,
    },
    WeightedMean {
        x: usize,
        weights: Arc<Vec<f64>>,
    },
    Composite {
        base: usize,
        src: usize,
        map: Arc<CompositeMap>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Warp { .. } => "bilinear_warp",
            Op::Correlation { .. } => "local_correlation",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Concat(_) => "concat",
            Op::AvgPool2(_) => "avg_pool2",
            Op::Upsample2(_) => "upsample2",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::EpeMap { .. } => "epe_map",
            Op::CosineMap { .. } => "cosine_map",
            Op::WeightedMean { .. } => "weighted_mean",
            Op::Composite { .. } => "composite",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, k, b, .. } | Op::ConvTranspose2d { x, k, b, .. } => {
                let mut v = vec![*x, *k];
                v.extend(b);
                v
            }
            Op::LeakyRelu { x, .. }
            | Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::AvgPool2(x)
            | Op::Upsample2(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::WeightedMean { x, .. } => vec![*x],
            Op::Warp { img, flow } => vec![*img, *flow],
            Op::Correlation { f1, f2, .. } => vec![*f1, *f2],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::EpeMap { a, b } => vec![*a, *b],
            Op::CosineMap { att, reference, .. } => vec![*att, *reference],
            Op::Concat(parts) => parts.clone(),
            Op::Composite { base, src, .. } => vec![*base, *src],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so every op's inputs precede it and a
/// single reverse sweep visits each op once. A graph supports exactly one
/// [`Graph::backward`]; record a fresh graph (or [`Graph::reset`]) for the next
/// step.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward's loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad matches value shape"))
    }

    /// Scalar value of a `1x1x1x1` node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::GraphConsumed)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op) -> Result<Var> {
        self.check_live()?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = requires_grad
            || op
                .inputs()
                .iter()
                .any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_op(&mut self, data: Vec<T>, shape: Shape, op: Op) -> Result<Var> {
        self.push(Tensor::new(shape, data)?, false, op)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(config_err!("{op}: shape {sa} does not match {sb}"));
        }
        Ok(sa)
    }

    fn check_bias(&self, op: &str, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.numel() != channels {
                return Err(config_err!(
                    "{op}: bias has {} values, expected {channels}",
                    bs.numel()
                ));
            }
        }
        Ok(())
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(k));
        if ks.c != xs.c {
            return Err(config_err!(
                "conv2d: kernel {ks} expects {} input channels, input {xs} has {}",
                ks.c,
                xs.c
            ));
        }
        if stride == 0 {
            return Err(config_err!("conv2d: stride must be >= 1"));
        }
        if kernels::conv_out_dim(xs.h, ks.h, stride, pad).is_none()
            || kernels::conv_out_dim(xs.w, ks.w, stride, pad).is_none()
        {
            return Err(config_err!("conv2d: kernel {ks} larger than padded input {xs} (pad {pad})"));
        }
        self.check_bias("conv2d", b, ks.n)?;
        let (out, os) = kernels::conv2d(
            self.value(x).data(),
            xs,
            self.value(k).data(),
            ks,
            b.map(|b| self.value(b).data()),
            stride,
            pad,
        );
        self.push_op(
            out,
            os,
            Op::Conv2d {
                x: x.0,
                k: k.0,
                b: b.map(|b| b.0),
                stride,
                pad,
            },
        )
    }

    /// `k` is `(C_in, C_out, kH, kW)`; output side is `(H - 1) * stride - 2 * pad + kH`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        k: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(x), self.shape(k));
        if ks.n != xs.c {
            return Err(config_err!(
                "conv_transpose2d: kernel {ks} expects {} input channels, input {xs} has {}",
                ks.n,
                xs.c
            ));
        }
        if stride == 0 {
            return Err(config_err!("conv_transpose2d: stride must be >= 1"));
        }
        if kernels::conv_transpose_out_dim(xs.h, ks.h, stride, pad).is_none()
            || kernels::conv_transpose_out_dim(xs.w, ks.w, stride, pad).is_none()
        {
            return Err(config_err!("conv_transpose2d: empty output for input {xs}, kernel {ks}, pad {pad}"));
        }
        self.check_bias("conv_transpose2d", b, ks.c)?;
        let (out, os) = kernels::conv_transpose2d(
            self.value(x).data(),
            xs,
            self.value(k).data(),
            ks,
            b.map(|b| self.value(b).data()),
            stride,
            pad,
        );
        self.push_op(
            out,
            os,
            Op::ConvTranspose2d {
                x: x.0,
                k: k.0,
                b: b.map(|b| b.0),
                stride,
                pad,
            },
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(config_err!("leaky_relu: slope {slope} outside [0, 1)"));
        }
        let s = T::from_f64_lossy(slope);
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v >= T::zero() { v } else { v * s })
            .collect();
        self.push_op(out, self.shape(x), Op::LeakyRelu { x: x.0, slope })
    }

    /// Samples `img` at `(x + u, y + v)`; `flow` is `N x 2 x H x W` in pixels.
    pub fn bilinear_warp(&mut self, img: Var, flow: Var) -> Result<Var> {
        let (is, fs) = (self.shape(img), self.shape(flow));
        if fs != Shape::new(is.n, 2, is.h, is.w) {
            return Err(config_err!("bilinear_warp: flow {fs} does not fit image {is}"));
        }
        let out = kernels::warp(self.value(img).data(), is, self.value(flow).data());
        self.push_op(
            out,
            is,
            Op::Warp {
                img: img.0,
                flow: flow.0,
            },
        )
    }

    pub fn local_correlation(&mut self, f1: Var, f2: Var, max_disp: usize) -> Result<Var> {
        let fs = self.same_shape("local_correlation", f1, f2)?;
        let (out, os) =
            kernels::correlation(self.value(f1).data(), self.value(f2).data(), fs, max_disp);
        self.push_op(
            out,
            os,
            Op::Correlation {
                f1: f1.0,
                f2: f2.0,
                max_disp,
            },
        )
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Result<Var> {
        let s = self.same_shape(op.name(), a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push_op(out, s, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let k = T::from_f64_lossy(s);
        let out = self.value(x).data().iter().map(|&v| v * k).collect();
        self.push_op(out, self.shape(x), Op::Scale { x: x.0, s })
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let k = T::from_f64_lossy(s);
        let out = self.value(x).data().iter().map(|&v| v + k).collect();
        self.push_op(out, self.shape(x), Op::AddScalar { x: x.0 })
    }

    /// Channel concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .map(|&p| self.shape(p))
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(config_err!("concat: {s} does not match {first} outside channels"));
            }
            channels += s.c;
        }
        let os = Shape::new(first.n, channels, first.h, first.w);
        let mut out = Vec::with_capacity(os.numel());
        for n in 0..first.n {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape().c * t.shape().plane();
                out.extend_from_slice(&t.data()[n * len..(n + 1) * len]);
            }
        }
        self.push_op(out, os, Op::Concat(parts.iter().map(|p| p.0).collect()))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.h % 2 != 0 || xs.w % 2 != 0 {
            return Err(config_err!("avg_pool2: spatial dims of {xs} must be even"));
        }
        let (out, os) = kernels::avg_pool2(self.value(x).data(), xs);
        self.push_op(out, os, Op::AvgPool2(x.0))
    }

    /// Bilinear ×2 upsampling with half-pixel centers.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (out, os) = kernels::upsample2(self.value(x).data(), self.shape(x));
        self.push_op(out, os, Op::Upsample2(x.0))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum_f64();
        self.push_op(vec![T::from_f64_lossy(s)], Shape::scalar(), Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.sum_f64() / t.shape().numel() as f64;
        self.push_op(vec![T::from_f64_lossy(s)], Shape::scalar(), Op::Mean(x.0))
    }

    /// Per-pixel Euclidean distance between two `N x 2 x H x W` fields.
    pub fn epe_map(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("epe_map", a, b)?;
        if s.c != 2 {
            return Err(config_err!("epe_map: expected 2 channels, got {s}"));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let plane = s.plane();
        let mut out = Vec::with_capacity(s.n * plane);
        for n in 0..s.n {
            let o = n * 2 * plane;
            for p in 0..plane {
                let du = av[o + p] - bv[o + p];
                let dv = av[o + plane + p] - bv[o + plane + p];
                out.push((du * du + dv * dv).sqrt());
            }
        }
        self.push_op(out, Shape::new(s.n, 1, s.h, s.w), Op::EpeMap { a: a.0, b: b.0 })
    }

    /// Per-pixel cosine between `att` and a fixed `reference` flow.
    ///
    /// `reference` is never differentiated. Pixels whose reference norm is
    /// below `min_ref_norm` yield 0.
    pub fn cosine_map(&mut self, att: Var, reference: Var, eps: f64, min_ref_norm: f64) -> Result<Var> {
        let s = self.same_shape("cosine_map", att, reference)?;
        if s.c != 2 {
            return Err(config_err!("cosine_map: expected 2 channels, got {s}"));
        }
        let (a, r) = (self.value(att).data(), self.value(reference).data());
        let plane = s.plane();
        let mut out = Vec::with_capacity(s.n * plane);
        for n in 0..s.n {
            let o = n * 2 * plane;
            for p in 0..plane {
                let (au, av) = (a[o + p].as_f64(), a[o + plane + p].as_f64());
                let (ru, rv) = (r[o + p].as_f64(), r[o + plane + p].as_f64());
                let rn = (ru * ru + rv * rv).sqrt();
                let v = if rn < min_ref_norm {
                    0.0
                } else {
                    let an = (au * au + av * av).sqrt();
                    (au * ru + av * rv) / (an * rn + eps)
                };
                out.push(T::from_f64_lossy(v));
            }
        }
        self.push_op(
            out,
            Shape::new(s.n, 1, s.h, s.w),
            Op::CosineMap {
                att: att.0,
                reference: reference.0,
                eps,
                min_ref_norm,
            },
        )
    }

    /// `sum(w * x) / sum(w)` with fixed per-element weights.
    pub fn weighted_mean(&mut self, x: Var, weights: Arc<Vec<f64>>) -> Result<Var> {
        let t = self.value(x);
        if weights.len() != t.shape().numel() {
            return Err(config_err!(
                "weighted_mean: {} weights for {} values",
                weights.len(),
                t.shape().numel()
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Usage("weighted_mean: weights sum to zero".into()));
        }
        let s: f64 = t
            .data()
            .iter()
            .zip(weights.iter())
            .map(|(v, w)| v.as_f64() * w)
            .sum();
        self.push_op(
            vec![T::from_f64_lossy(s / total)],
            Shape::scalar(),
            Op::WeightedMean { x: x.0, weights },
        )
    }

    /// Pastes `src` (`1 x C x h x w`) into `base` (`1 x C x H x W`) through `map`.
    pub fn composite(&mut self, base: Var, src: Var, map: Arc<CompositeMap>) -> Result<Var> {
        let (bs, ss) = (self.shape(base), self.shape(src));
        if bs.n != 1 || ss.n != 1 || bs.c != ss.c {
            return Err(config_err!("composite: base {bs} and source {ss} must be single images with equal channels"));
        }
        if map.dst_dims != (bs.h, bs.w) || map.src_dims != (ss.h, ss.w) {
            return Err(config_err!(
                "composite: map built for {:?} <- {:?}, got {bs} <- {ss}",
                map.dst_dims,
                map.src_dims
            ));
        }
        let mut out = self.value(base).data().to_vec();
        let src_v = self.value(src).data();
        let (bp, sp) = (bs.plane(), ss.plane());
        for c in 0..bs.c {
            for (dst, taps) in map.entries() {
                let mut acc = T::zero();
                for &(s, w) in taps {
                    acc += src_v[c * sp + s] * T::from_f64_lossy(w);
                }
                out[c * bp + dst] = acc;
            }
        }
        self.push_op(
            out,
            bs,
            Op::Composite {
                base: base.0,
                src: src.0,
                map,
            },
        )
    }

    /// Reverse sweep from a scalar `loss`, filling gradients of every leaf that
    /// requires one. Consumes the graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_live()?;
        if self.shape(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if let Op::Leaf = op {
                self.nodes[i].grad = Some(g);
                continue;
            }
            for (input, contribution) in self.local_grads(i, &op, &g) {
                accumulate(&mut grads[input], contribution);
            }
        }
        Ok(())
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn local_grads(&self, out: usize, op: &Op, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let val = |i: usize| &self.nodes[i].value;
        let mut res = Vec::new();
        match *op {
            Op::Leaf => {}
            Op::Conv2d { x, k, b, stride, pad } | Op::ConvTranspose2d { x, k, b, stride, pad } => {
                let need = [self.needs(x), self.needs(k), b.is_some_and(|b| self.needs(b))];
                let args = (
                    val(x).data(),
                    val(x).shape(),
                    val(k).data(),
                    val(k).shape(),
                    g,
                    val(out).shape(),
                    stride,
                    pad,
                    need,
                );
                let grads = if matches!(op, Op::Conv2d { .. }) {
                    kernels::conv2d_backward(args.0, args.1, args.2, args.3, args.4, args.5, args.6, args.7, args.8)
                } else {
                    kernels::conv_transpose2d_backward(
                        args.0, args.1, args.2, args.3, args.4, args.5, args.6, args.7, args.8,
                    )
                };
                res.extend(grads.input.map(|gx| (x, gx)));
                res.extend(grads.kernel.map(|gk| (k, gk)));
                if let (Some(b), Some(gb)) = (b, grads.bias) {
                    res.push((b, gb));
                }
            }
            Op::LeakyRelu { x, slope } => {
                let s = T::from_f64_lossy(slope);
                let gx = val(x)
                    .data()
                    .iter()
                    .zip(g)
                    // Subgradient at exactly 0 is the slope.
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { gv * s })
                    .collect();
                res.push((x, gx));
            }
            Op::Warp { img, flow } => {
                let (gi, gf) = kernels::warp_backward(
                    val(img).data(),
                    val(img).shape(),
                    val(flow).data(),
                    g,
                    [self.needs(img), self.needs(flow)],
                );
                res.extend(gi.map(|gi| (img, gi)));
                res.extend(gf.map(|gf| (flow, gf)));
            }
            Op::Correlation { f1, f2, max_disp } => {
                let (g1, g2) = kernels::correlation_backward(
                    val(f1).data(),
                    val(f2).data(),
                    val(f1).shape(),
                    max_disp,
                    g,
                    [self.needs(f1), self.needs(f2)],
                );
                res.extend(g1.map(|g1| (f1, g1)));
                res.extend(g2.map(|g2| (f2, g2)));
            }
            Op::Add(a, b) => {
                res.push((a, g.to_vec()));
                res.push((b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                res.push((a, g.to_vec()));
                res.push((b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                res.push((a, g.iter().zip(val(b).data()).map(|(&gv, &bv)| gv * bv).collect()));
                res.push((b, g.iter().zip(val(a).data()).map(|(&gv, &av)| gv * av).collect()));
            }
            Op::Scale { x, s } => {
                let k = T::from_f64_lossy(s);
                res.push((x, g.iter().map(|&v| v * k).collect()));
            }
            Op::AddScalar { x } => res.push((x, g.to_vec())),
            Op::Concat(ref parts) => {
                let os = val(out).shape();
                let mut offset = 0;
                for &p in parts {
                    let ps = val(p).shape();
                    let len = ps.c * ps.plane();
                    let mut gp = Vec::with_capacity(ps.numel());
                    for n in 0..os.n {
                        let start = n * os.c * os.plane() + offset;
                        gp.extend_from_slice(&g[start..start + len]);
                    }
                    offset += len;
                    res.push((p, gp));
                }
            }
            Op::AvgPool2(x) => res.push((x, kernels::avg_pool2_backward(g, val(x).shape()))),
            Op::Upsample2(x) => res.push((x, kernels::upsample2_backward(g, val(x).shape()))),
            Op::Sum(x) => res.push((x, vec![g[0]; val(x).shape().numel()])),
            Op::Mean(x) => {
                let n = val(x).shape().numel();
                res.push((x, vec![g[0] / T::from_f64_lossy(n as f64); n]));
            }
            Op::EpeMap { a, b } => {
                let s = val(a).shape();
                let (av, bv) = (val(a).data(), val(b).data());
                let plane = s.plane();
                let mut ga = vec![T::zero(); s.numel()];
                for n in 0..s.n {
                    let o = n * 2 * plane;
                    for p in 0..plane {
                        let d = val(out).data()[n * plane + p];
                        if d > T::zero() {
                            let k = g[n * plane + p] / d;
                            ga[o + p] = k * (av[o + p] - bv[o + p]);
                            ga[o + plane + p] = k * (av[o + plane + p] - bv[o + plane + p]);
                        }
                    }
                }
                res.push((b, ga.iter().map(|&v| -v).collect()));
                res.push((a, ga));
            }
            Op::CosineMap {
                att,
                reference,
                eps,
                min_ref_norm,
            } => {
                let s = val(att).shape();
                let (a, r) = (val(att).data(), val(reference).data());
                let plane = s.plane();
                let mut ga = vec![T::zero(); s.numel()];
                for n in 0..s.n {
                    let o = n * 2 * plane;
                    for p in 0..plane {
                        let (au, av) = (a[o + p].as_f64(), a[o + plane + p].as_f64());
                        let (ru, rv) = (r[o + p].as_f64(), r[o + plane + p].as_f64());
                        let rn = (ru * ru + rv * rv).sqrt();
                        let an = (au * au + av * av).sqrt();
                        if rn < min_ref_norm || an == 0.0 {
                            continue;
                        }
                        // d/da [a.r / (|a| |r| + eps)]
                        let dot = au * ru + av * rv;
                        let den = an * rn + eps;
                        let gv = g[n * plane + p].as_f64();
                        let coef = dot * rn / (an * den * den);
                        ga[o + p] = T::from_f64_lossy(gv * (ru / den - coef * au));
                        ga[o + plane + p] = T::from_f64_lossy(gv * (rv / den - coef * av));
                    }
                }
                res.push((att, ga));
            }
            Op::WeightedMean { x, ref weights } => {
                let total: f64 = weights.iter().sum();
                let g0 = g[0].as_f64() / total;
                res.push((x, weights.iter().map(|w| T::from_f64_lossy(w * g0)).collect()));
            }
            Op::Composite { base, src, ref map } => {
                let (bs, ss) = (val(base).shape(), val(src).shape());
                let (bp, sp) = (bs.plane(), ss.plane());
                if self.needs(base) {
                    let mut gb = g.to_vec();
                    for c in 0..bs.c {
                        for d in map.destinations() {
                            gb[c * bp + d] = T::zero();
                        }
                    }
                    res.push((base, gb));
                }
                if self.needs(src) {
                    let mut gs = vec![T::zero(); ss.numel()];
                    for c in 0..bs.c {
                        for (dst, taps) in map.entries() {
                            let gd = g[c * bp + dst];
                            for &(s, w) in taps {
                                gs[c * sp + s] += gd * T::from_f64_lossy(w);
                            }
                        }
                    }
                    res.push((src, gs));
                }
            }
        }
        res.retain(|(i, _)| self.needs(*i));
        res
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
}
