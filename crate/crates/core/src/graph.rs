//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in execution order, so the tape is
//! topologically sorted by construction. Leaves are either trainable
//! (named, receive gradients) or constants. [`Graph::backward`] walks the
//! tape in reverse and accumulates adjoints with `+=` for fan-out.

use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Slope of the negative half of `leaky_relu`.
pub const LEAKY_SLOPE: f64 = 0.2;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    LeakyRelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `mul · x + add` with constant scalars.
    Affine(Var, f64),
    MulScalarVar { x: Var, s: Var },
    Activation(Activation, Var),
    Abs(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    ChannelDot(Var, Var),
    ChannelWeight { weight: Var, x: Var },
    SoftmaxSet { inputs: Vec<Var>, index: usize, weights: Rc<Vec<Vec<f64>>> },
    ChannelSlice { x: Var, start: usize },
    SliceFlat { x: Var, start: usize },
    Reshape(Var),
    ConcatChannels(Vec<Var>),
    SpatialMean(Var),
    BatchScale { x: Var, coeffs: Vec<f64> },
    Reduce(Reduction, Var),
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// Gradients of trainable leaves, keyed by leaf name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.by_name
    }
}

pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        debug_assert_eq!(v.graph, self.id, "variable from another graph");
        &self.nodes[v.index]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::InvalidArgument("variable is not recorded on this graph".into()));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    /// A trainable leaf; `backward` reports its gradient under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.index].name = Some(name.into());
        v
    }

    /// A non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// `mul · a + add` elementwise, e.g. `affine(g, -1.0, 1.0)` for `1 − g`.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let value = self.value(a).map(|v| mul * v + add);
        let rg = self.rg(&[a]);
        self.push(value, Op::Affine(a, mul), rg)
    }

    /// Scales `x` by the single value held in the one-element tensor `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar_var",
                left: self.shape(x).to_vec(),
                right: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s).item();
        let value = self.value(x).scale(sv);
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, Op::MulScalarVar { x, s }, rg))
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        let rg = self.rg(&[x]);
        self.push(value, Op::Activation(kind, x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(Activation::Tanh, x)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.activation(Activation::LeakyRelu, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        let rg = self.rg(&[x]);
        self.push(value, Op::Abs(x), rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (value, geom) = conv::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, padding)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (value, geom) = conv::conv_transpose2d_forward(self.value(x), self.value(w), self.value(b), stride, padding)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom }, rg))
    }

    /// Per-location inner product over channels: `B×C×H×W` pair to `B×1×H×W`.
    pub fn channel_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.same_shape(vb, "channel_dot")?;
        let [bn, c, h, w] = va.dims4("channel_dot")?;
        let plane = h * w;
        let mut out = vec![0.0; bn * plane];
        for bi in 0..bn {
            let o = &mut out[bi * plane..][..plane];
            for ci in 0..c {
                let off = (bi * c + ci) * plane;
                for (p, op) in o.iter_mut().enumerate() {
                    *op += va.data()[off + p] * vb.data()[off + p];
                }
            }
        }
        let value = Tensor::new(&[bn, 1, h, w], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::ChannelDot(a, b), rg))
    }

    /// Multiplies every channel of `x` (`B×C×H×W`) by the map `weight` (`B×1×H×W`).
    pub fn channel_weight(&mut self, weight: Var, x: Var) -> Result<Var> {
        let (vw, vx) = (self.value(weight), self.value(x));
        let [bn, c, h, w] = vx.dims4("channel_weight")?;
        if vw.shape() != [bn, 1, h, w] {
            return Err(Error::ShapeMismatch {
                op: "channel_weight",
                left: vw.shape().to_vec(),
                right: vx.shape().to_vec(),
            });
        }
        let plane = h * w;
        let mut out = vx.data().to_vec();
        for bi in 0..bn {
            let wm = &vw.data()[bi * plane..][..plane];
            for ci in 0..c {
                for (o, &wv) in out[(bi * c + ci) * plane..][..plane].iter_mut().zip(wm) {
                    *o *= wv;
                }
            }
        }
        let value = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(&[weight, x]);
        Ok(self.push(value, Op::ChannelWeight { weight, x }, rg))
    }

    /// Softmax across a set of same-shaped score tensors, independently at
    /// every coordinate. Returns one weight tensor per input.
    pub fn softmax_over_set(&mut self, scores: &[Var]) -> Result<Vec<Var>> {
        let first = *scores
            .first()
            .ok_or_else(|| Error::InvalidArgument("softmax_over_set needs at least one score tensor".into()))?;
        for &s in &scores[1..] {
            self.value(first).same_shape(self.value(s), "softmax_over_set")?;
        }
        let shape = self.shape(first).to_vec();
        let n = self.value(first).numel();
        let k = scores.len();
        let mut weights = vec![vec![0.0; n]; k];
        for j in 0..n {
            let m = scores.iter().map(|&s| self.value(s).data()[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (i, &s) in scores.iter().enumerate() {
                let e = (self.value(s).data()[j] - m).exp();
                weights[i][j] = e;
                total += e;
            }
            for w in weights.iter_mut() {
                w[j] /= total;
            }
        }
        let rg = self.rg(scores);
        let shared = Rc::new(weights);
        let mut outs = Vec::with_capacity(k);
        for i in 0..k {
            let value = Tensor::new(&shape, shared[i].clone())?;
            outs.push(self.push(
                value,
                Op::SoftmaxSet {
                    inputs: scores.to_vec(),
                    index: i,
                    weights: Rc::clone(&shared),
                },
                rg,
            ));
        }
        Ok(outs)
    }

    /// Channels `start..start+len` of a rank-4 tensor.
    pub fn channel_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let [bn, c, h, w] = vx.dims4("channel_slice")?;
        if len == 0 || start + len > c {
            return Err(Error::geometry(
                "channel_slice",
                format!("channels {start}..{} out of range for {c}", start + len),
            ));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(bn * len * plane);
        for bi in 0..bn {
            out.extend_from_slice(&vx.data()[(bi * c + start) * plane..][..len * plane]);
        }
        let value = Tensor::new(&[bn, len, h, w], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::ChannelSlice { x, start }, rg))
    }

    /// Elements `start..start+len` of the flattened tensor, as a rank-1 tensor.
    pub fn slice_flat(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if len == 0 || start + len > vx.numel() {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{} out of range for {} elements",
                start + len,
                vx.numel()
            )));
        }
        let value = Tensor::from_vec(vx.data()[start..start + len].to_vec());
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceFlat { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Splits `B×(4C)×H×W` into four contiguous `B×C×H×W` quarters.
    pub fn channel_split4(&mut self, x: Var) -> Result<[Var; 4]> {
        let [_, c, _, _] = self.value(x).dims4("channel_split")?;
        if c % 4 != 0 {
            return Err(Error::geometry(
                "channel_split",
                format!("channel count {c} is not divisible by 4"),
            ));
        }
        let q = c / 4;
        Ok([
            self.channel_slice(x, 0, q)?,
            self.channel_slice(x, q, q)?,
            self.channel_slice(x, 2 * q, q)?,
            self.channel_slice(x, 3 * q, q)?,
        ])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let [bn, _, h, w] = self.value(first).dims4("concat_channels")?;
        let mut total = 0;
        for &p in parts {
            let [pb, pc, ph, pw] = self.value(p).dims4("concat_channels")?;
            if (pb, ph, pw) != (bn, h, w) {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            total += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(bn * total * plane);
        for bi in 0..bn {
            for &p in parts {
                let vp = self.value(p);
                let pc = vp.shape()[1];
                out.extend_from_slice(&vp.data()[bi * pc * plane..][..pc * plane]);
            }
        }
        let value = Tensor::new(&[bn, total, h, w], out)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatChannels(parts.to_vec()), rg))
    }

    /// Mean over the spatial extent: `B×C×H×W` to `B×C×1×1`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let [bn, c, h, w] = vx.dims4("spatial_mean")?;
        let plane = h * w;
        let out = vx
            .data()
            .chunks_exact(plane)
            .map(|ch| ch.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(&[bn, c, 1, 1], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SpatialMean(x), rg))
    }

    /// Scales each batch item of `x` by a constant coefficient.
    pub fn batch_scale(&mut self, x: Var, coeffs: &[f64]) -> Result<Var> {
        let vx = self.value(x);
        let bn = vx.shape()[0];
        if coeffs.len() != bn {
            return Err(Error::ShapeMismatch {
                op: "batch_scale",
                left: vx.shape().to_vec(),
                right: vec![coeffs.len()],
            });
        }
        let inner = vx.numel() / bn;
        let mut out = vx.data().to_vec();
        for (chunk, &c) in out.chunks_exact_mut(inner).zip(coeffs) {
            for v in chunk {
                *v *= c;
            }
        }
        let value = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::BatchScale {
                x,
                coeffs: coeffs.to_vec(),
            },
            rg,
        ))
    }

    pub fn reduce(&mut self, kind: Reduction, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.sum();
        let value = match kind {
            Reduction::Sum => s,
            Reduction::Mean => s / vx.numel() as f64,
        };
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(value), Op::Reduce(kind, x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(Reduction::Sum, x)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(Reduction::Mean, x)
    }

    /// Mean binary cross-entropy of `logits` against constant 0/1 targets,
    /// in the overflow-free form `max(z,0) − z·y + ln(1 + e^{−|z|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let vz = self.value(logits);
        vz.same_shape(targets, "bce_with_logits")?;
        let n = vz.numel() as f64;
        let total: f64 = vz
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            rg,
        ))
    }

    /// Reverse-mode pass from a scalar `loss`. Returns gradients for every
    /// trainable leaf that `loss` depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut send = |v: Var, d: Vec<f64>| {
                if !self.nodes[v.index].requires_grad {
                    return;
                }
                match &mut grads[v.index] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(d) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    if let Some(name) = &node.name {
                        let t = Tensor::new(node.value.shape(), g)?;
                        match out.by_name.get_mut(name) {
                            // Same name registered twice: the leaves share one parameter.
                            Some(acc) => *acc = acc.add(&t)?,
                            None => {
                                out.by_name.insert(name.clone(), t);
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    send(*a, g.iter().zip(vb).map(|(g, b)| g * b).collect());
                    send(*b, g.iter().zip(va).map(|(g, a)| g * a).collect());
                }
                Op::Affine(a, mul) => send(*a, g.iter().map(|v| v * mul).collect()),
                Op::MulScalarVar { x, s } => {
                    let sv = self.value(*s).item();
                    let ds: f64 = g.iter().zip(self.value(*x).data()).map(|(g, x)| g * x).sum();
                    send(*x, g.iter().map(|v| v * sv).collect());
                    send(*s, vec![ds]);
                }
                Op::Activation(kind, x) => {
                    let d = match kind {
                        Activation::Sigmoid => g.iter().zip(node.value.data()).map(|(g, y)| g * y * (1.0 - y)).collect(),
                        Activation::Tanh => g.iter().zip(node.value.data()).map(|(g, y)| g * (1.0 - y * y)).collect(),
                        Activation::LeakyRelu => g
                            .iter()
                            .zip(self.value(*x).data())
                            .map(|(g, &x)| if x > 0.0 { *g } else { LEAKY_SLOPE * g })
                            .collect(),
                    };
                    send(*x, d);
                }
                Op::Abs(x) => {
                    let d = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(g, &x)| {
                            if x > 0.0 {
                                *g
                            } else if x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    send(*x, d);
                }
                Op::Conv2d { x, w, b, geom } => {
                    let need_x = self.node(*x).requires_grad;
                    let need_p = self.node(*w).requires_grad || self.node(*b).requires_grad;
                    let (dx, dp) = conv::conv2d_backward(&g, self.value(*x).data(), self.value(*w).data(), geom, need_x, need_p);
                    if let Some(dx) = dx {
                        send(*x, dx);
                    }
                    if let Some((dw, db)) = dp {
                        send(*w, dw);
                        send(*b, db);
                    }
                }
                Op::ConvTranspose2d { x, w, b, geom } => {
                    let need_x = self.node(*x).requires_grad;
                    let need_p = self.node(*w).requires_grad || self.node(*b).requires_grad;
                    let (dx, dp) =
                        conv::conv_transpose2d_backward(&g, self.value(*x).data(), self.value(*w).data(), geom, need_x, need_p);
                    if let Some(dx) = dx {
                        send(*x, dx);
                    }
                    if let Some((dw, db)) = dp {
                        send(*w, dw);
                        send(*b, db);
                    }
                }
                Op::ChannelDot(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let [bn, c, h, w] = va.dims4("channel_dot")?;
                    let plane = h * w;
                    let mut da = vec![0.0; va.numel()];
                    let mut db = vec![0.0; vb.numel()];
                    for bi in 0..bn {
                        let gm = &g[bi * plane..][..plane];
                        for ci in 0..c {
                            let off = (bi * c + ci) * plane;
                            for p in 0..plane {
                                da[off + p] = gm[p] * vb.data()[off + p];
                                db[off + p] = gm[p] * va.data()[off + p];
                            }
                        }
                    }
                    send(*a, da);
                    send(*b, db);
                }
                Op::ChannelWeight { weight, x } => {
                    let (vw, vx) = (self.value(*weight), self.value(*x));
                    let [bn, c, h, w] = vx.dims4("channel_weight")?;
                    let plane = h * w;
                    let mut dw = vec![0.0; vw.numel()];
                    let mut dx = vec![0.0; vx.numel()];
                    for bi in 0..bn {
                        for ci in 0..c {
                            let off = (bi * c + ci) * plane;
                            for p in 0..plane {
                                dw[bi * plane + p] += g[off + p] * vx.data()[off + p];
                                dx[off + p] = g[off + p] * vw.data()[bi * plane + p];
                            }
                        }
                    }
                    send(*weight, dw);
                    send(*x, dx);
                }
                Op::SoftmaxSet { inputs, index, weights } => {
                    // d w_i / d s_j = w_i (δ_ij − w_j)
                    let wi = &weights[*index];
                    for (j, &s) in inputs.iter().enumerate() {
                        let wj = &weights[j];
                        let d = (0..g.len())
                            .map(|p| {
                                let delta = if j == *index { 1.0 } else { 0.0 };
                                g[p] * wi[p] * (delta - wj[p])
                            })
                            .collect();
                        send(s, d);
                    }
                }
                Op::ChannelSlice { x, start } => {
                    let vx = self.value(*x);
                    let [bn, c, h, w] = vx.dims4("channel_slice")?;
                    let len = node.value.shape()[1];
                    let plane = h * w;
                    let mut dx = vec![0.0; vx.numel()];
                    for bi in 0..bn {
                        dx[(bi * c + start) * plane..][..len * plane].copy_from_slice(&g[bi * len * plane..][..len * plane]);
                    }
                    send(*x, dx);
                }
                Op::SliceFlat { x, start } => {
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    dx[*start..*start + g.len()].copy_from_slice(&g);
                    send(*x, dx);
                }
                Op::Reshape(x) => send(*x, g),
                Op::ConcatChannels(parts) => {
                    let [bn, total, h, w] = node.value.dims4("concat_channels")?;
                    let plane = h * w;
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.shape(p)[1];
                        let mut dp = Vec::with_capacity(bn * pc * plane);
                        for bi in 0..bn {
                            dp.extend_from_slice(&g[(bi * total + offset) * plane..][..pc * plane]);
                        }
                        offset += pc;
                        send(p, dp);
                    }
                }
                Op::SpatialMean(x) => {
                    let vx = self.value(*x);
                    let [_, _, h, w] = vx.dims4("spatial_mean")?;
                    let plane = h * w;
                    let inv = 1.0 / plane as f64;
                    let dx = g.iter().flat_map(|&gv| std::iter::repeat(gv * inv).take(plane)).collect();
                    send(*x, dx);
                }
                Op::BatchScale { x, coeffs } => {
                    let inner = g.len() / coeffs.len();
                    let dx = g.chunks_exact(inner).zip(coeffs).flat_map(|(ch, &c)| ch.iter().map(move |v| v * c)).collect();
                    send(*x, dx);
                }
                Op::Reduce(kind, x) => {
                    let n = self.value(*x).numel();
                    let d = match kind {
                        Reduction::Sum => g[0],
                        Reduction::Mean => g[0] / n as f64,
                    };
                    send(*x, vec![d; n]);
                }
                Op::BceWithLogits { logits, targets } => {
                    let vz = self.value(*logits).data();
                    let scale = g[0] / vz.len() as f64;
                    let d = vz.iter().zip(targets).map(|(&z, &y)| (sigmoid(z) - y) * scale).collect();
                    send(*logits, d);
                }
            }
        }
        Ok(out)
    }
}

/// Largest coordinate-wise relative error between the reverse-mode gradient
/// of the scalar function `f` at `x` and central differences with step `h`,
/// measured as `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |point: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point.clone());
        let y = f(&mut g, v)?;
        let out = g.value(y);
        if !out.is_scalar() {
            return Err(Error::InvalidArgument("grad_check needs a scalar-valued function".into()));
        }
        Ok(out.item())
    };
    let mut g = Graph::new();
    let v = g.param("x", x.clone());
    let y = f(&mut g, v)?;
    let grads = g.backward(y)?;
    let analytic = grads.get("x").cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut worst = 0.0f64;
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = eval(&Tensor::new(x.shape(), probe.clone())?)?;
        probe[i] = orig - h;
        let minus = eval(&Tensor::new(x.shape(), probe.clone())?)?;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
