//! Named parameter collections and their binding onto a [`Graph`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Trainable tensors keyed by dotted name (e.g. `gen.cell0.conv_t_next.w`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Conv weight `out × in × k × k`, uniform in `±√(6/fan_in)` with
    /// `fan_in = in·k·k`, and a zero bias.
    pub fn init_conv<R: Rng + ?Sized>(&mut self, prefix: &str, out_ch: usize, in_ch: usize, k: usize, rng: &mut R) {
        let bound = (6.0 / (in_ch * k * k) as f64).sqrt();
        self.insert(format!("{prefix}.w"), Tensor::uniform(&[out_ch, in_ch, k, k], -bound, bound, rng));
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[out_ch]));
    }

    /// Transposed-conv weight `in × out × k × k`. Each output sums about
    /// `in·(k/stride)²` products, which sets the fan-in.
    pub fn init_conv_transpose<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) {
        let taps = (k / stride.max(1)).max(1);
        let bound = (6.0 / (in_ch * taps * taps) as f64).sqrt();
        self.insert(format!("{prefix}.w"), Tensor::uniform(&[in_ch, out_ch, k, k], -bound, bound, rng));
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[out_ch]));
    }

    /// Every tensor replaced by zeros of the same shape.
    pub fn zeroed(&self) -> ParamStore {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Records every parameter on `graph`, as trainable leaves or constants.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .map
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    graph.param(name.clone(), t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    /// `(weight, bias)` handles for the layer at `prefix`.
    pub fn conv(&self, prefix: &str) -> Result<ConvVars> {
        Ok(ConvVars {
            w: self.var(&format!("{prefix}.w"))?,
            b: self.var(&format!("{prefix}.b"))?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub w: Var,
    pub b: Var,
}
