//! The multi-attention recurrent unit.
//!
//! One step takes the temporal state `T_t`, the spatial state `S_t`, the
//! layer's history windows of past outputs, and a pixel-attention map, and
//! returns updated `(T, S)`:
//!
//! 1. project both states with a conv (`s_next`, `t_next`);
//! 2. aggregate the temporal history into a trend, weighting each past
//!    temporal output by a per-location softmax over its spatial partner's
//!    agreement with `s_next`;
//! 3. gate the temporal state against the trend, and the spatial state by the
//!    sigmoid of the pixel attention;
//! 4. split a conv of each fused tensor into four parts (content and gate
//!    pairs) and cross-combine them;
//! 5. blend the gated update with the fused input by learnable
//!    `α = sigmoid(raw_α)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ConvVars, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellConfig {
    pub channels: usize,
    /// History window length.
    pub tau: usize,
    /// Square kernel size of every cell conv; padding keeps the spatial size.
    pub kernel: usize,
}

impl CellConfig {
    pub fn new(channels: usize, tau: usize) -> Self {
        CellConfig {
            channels,
            tau,
            kernel: 3,
        }
    }

    fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.tau == 0 || self.kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "cell needs positive channels and tau and an odd kernel, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Adds the parameters of one cell under `prefix`.
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, prefix: &str, rng: &mut R) {
        let (c, k) = (self.channels, self.kernel);
        store.init_conv(&format!("{prefix}.conv_s_next"), c, c, k, rng);
        store.init_conv(&format!("{prefix}.conv_t_next"), c, c, k, rng);
        store.init_conv(&format!("{prefix}.conv_t_fusion"), 4 * c, c, k, rng);
        store.init_conv(&format!("{prefix}.conv_s_fusion"), 4 * c, c, k, rng);
        store.insert(format!("{prefix}.raw_alpha_t"), crate::Tensor::scalar(0.0));
        store.insert(format!("{prefix}.raw_alpha_s"), crate::Tensor::scalar(0.0));
    }
}

/// Graph handles of one cell's parameters.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub conv_s_next: ConvVars,
    pub conv_t_next: ConvVars,
    pub conv_t_fusion: ConvVars,
    pub conv_s_fusion: ConvVars,
    pub raw_alpha_t: Var,
    pub raw_alpha_s: Var,
}

impl CellVars {
    pub fn from_bound(bound: &Bound, prefix: &str) -> Result<Self> {
        Ok(CellVars {
            conv_s_next: bound.conv(&format!("{prefix}.conv_s_next"))?,
            conv_t_next: bound.conv(&format!("{prefix}.conv_t_next"))?,
            conv_t_fusion: bound.conv(&format!("{prefix}.conv_t_fusion"))?,
            conv_s_fusion: bound.conv(&format!("{prefix}.conv_s_fusion"))?,
            raw_alpha_t: bound.var(&format!("{prefix}.raw_alpha_t"))?,
            raw_alpha_s: bound.var(&format!("{prefix}.raw_alpha_s"))?,
        })
    }
}

/// Inputs of one cell step. All tensors are `B×C×H×W`.
#[derive(Clone, Copy, Debug)]
pub struct CellInput<'a> {
    pub t: Var,
    pub s: Var,
    pub t_att: &'a [Var],
    pub s_att: &'a [Var],
    pub s_pixel_att: Var,
}

/// Outputs of one cell step, with the intermediates the blend is built from.
#[derive(Clone, Copy, Debug)]
pub struct CellOutput {
    pub out_t: Var,
    pub out_s: Var,
    pub t_trend: Var,
    pub t_fusion: Var,
    pub s_fusion: Var,
    pub t_new_1: Var,
    pub s_new_1: Var,
}

/// Softmax-weighted sum of `t_att` with per-location scores
/// `⟨s_att[i], s_next⟩_channels / √C`.
pub fn temporal_trend(g: &mut Graph, s_att: &[Var], s_next: Var, t_att: &[Var]) -> Result<Var> {
    if s_att.is_empty() || s_att.len() != t_att.len() {
        return Err(Error::InvalidArgument(format!(
            "temporal_trend needs matching non-empty histories, got {} spatial and {} temporal",
            s_att.len(),
            t_att.len()
        )));
    }
    let channels = g.value(s_next).dims4("temporal_trend")?[1];
    let inv_sqrt_d = 1.0 / (channels as f64).sqrt();
    let mut scores = Vec::with_capacity(s_att.len());
    for &s in s_att {
        let dot = g.channel_dot(s, s_next)?;
        scores.push(g.scale(dot, inv_sqrt_d));
    }
    let weights = g.softmax_over_set(&scores)?;
    let mut trend = g.channel_weight(weights[0], t_att[0])?;
    for (&w, &t) in weights.iter().zip(t_att).skip(1) {
        let term = g.channel_weight(w, t)?;
        trend = g.add(trend, term)?;
    }
    Ok(trend)
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(format!("maucell {name}")))
}

/// One cell step.
pub fn cell_forward(g: &mut Graph, cfg: &CellConfig, input: CellInput<'_>, p: &CellVars) -> Result<CellOutput> {
    let pad = cfg.padding();
    let conv = |g: &mut Graph, x: Var, cv: ConvVars| g.conv2d(x, cv.w, cv.b, 1, pad);

    let s_next = stage("s_next", conv(g, input.s, p.conv_s_next))?;
    let t_next = stage("t_next", conv(g, input.t, p.conv_t_next))?;
    let t_trend = stage("temporal_trend", temporal_trend(g, input.s_att, s_next, input.t_att))?;

    // (s_next also has a sigmoid gate, which the update below never reads.)
    let t_gate = g.sigmoid(t_next);
    let kept = stage("t_fusion", g.mul(input.t, t_gate))?;
    let t_gate_c = g.affine(t_gate, -1.0, 1.0);
    let from_trend = stage("t_fusion", g.mul(t_gate_c, t_trend))?;
    let t_fusion = stage("t_fusion", g.add(kept, from_trend))?;

    let pixel_gate = g.sigmoid(input.s_pixel_att);
    let s_fusion = stage("s_fusion", g.mul(input.s, pixel_gate))?;

    let t_parts = stage("t_split", conv(g, t_fusion, p.conv_t_fusion).and_then(|x| g.channel_split4(x)))?;
    let s_parts = stage("s_split", conv(g, s_fusion, p.conv_s_fusion).and_then(|x| g.channel_split4(x)))?;
    let [t_i, t_r, _t_t, t_s] = t_parts;
    let [s_i, s_r, s_t, _s_s] = s_parts;
    let t_i = g.tanh(t_i);
    let t_r = g.sigmoid(t_r);
    let t_s = g.sigmoid(t_s);
    let s_i = g.tanh(s_i);
    let s_r = g.sigmoid(s_r);
    let s_t = g.sigmoid(s_t);

    // Each state's update is gated across from the other branch.
    let a = stage("t_new", g.mul(t_r, t_i))?;
    let b = stage("t_new", g.mul(s_t, t_fusion))?;
    let t_new_1 = stage("t_new", g.add(a, b))?;
    let a = stage("s_new", g.mul(s_r, s_i))?;
    let b = stage("s_new", g.mul(t_s, s_fusion))?;
    let s_new_1 = stage("s_new", g.add(a, b))?;

    let out_t = stage("out_t", blend(g, p.raw_alpha_t, t_new_1, t_fusion))?;
    let out_s = stage("out_s", blend(g, p.raw_alpha_s, s_new_1, s_fusion))?;

    Ok(CellOutput {
        out_t,
        out_s,
        t_trend,
        t_fusion,
        s_fusion,
        t_new_1,
        s_new_1,
    })
}

/// `α·update + (1−α)·residual` with `α = sigmoid(raw)`.
fn blend(g: &mut Graph, raw: Var, update: Var, residual: Var) -> Result<Var> {
    let alpha = g.sigmoid(raw);
    let one_minus = g.affine(alpha, -1.0, 1.0);
    let a = g.mul_scalar_var(update, alpha)?;
    let b = g.mul_scalar_var(residual, one_minus)?;
    g.add(a, b)
}
