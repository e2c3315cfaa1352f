//! Frame discriminator: the generator's encoder + recurrent-cell pattern
//! with independent weights, ending in a per-frame real/fake logit.
//!
//! The head concatenates the spatial means of the top layer's spatial and
//! temporal outputs and maps them to one logit with an affine layer. Frame
//! `t`'s logit depends only on frames `..=t`.

use rand::Rng;

use crate::cell::{CellConfig, CellVars};
use crate::error::{Error, Result};
use crate::generator::{encode_frame, frame_at, init_encoder, RecurrentState};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub num_layers: usize,
    pub hidden_channels: usize,
    pub tau: usize,
    pub frame_channels: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub encoder_depth: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            num_layers: 2,
            hidden_channels: 16,
            tau: 5,
            frame_channels: 1,
            frame_height: 16,
            frame_width: 16,
            encoder_depth: 2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn cell(&self) -> CellConfig {
        CellConfig::new(self.hidden_channels, self.tau)
    }

    pub fn feature_shape(&self, batch: usize) -> [usize; 4] {
        let f = 1 << self.encoder_depth;
        [batch, self.hidden_channels, self.frame_height / f, self.frame_width / f]
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        init_encoder(&mut store, "disc", self.frame_channels, self.hidden_channels, self.encoder_depth, rng);
        for i in 0..self.num_layers {
            self.cell().init_params(&mut store, &format!("disc.cell{i}"), rng);
        }
        store.init_conv("disc.head", 1, 2 * self.hidden_channels, 1, rng);
        store
    }
}

/// Records the discriminator over `frames` (each `B×c×H×W`) and returns the
/// logits as a `B×T×1×1` variable.
pub fn discriminate_frames(g: &mut Graph, frames: &[Var], params: &Bound, cfg: &DiscriminatorConfig) -> Result<Var> {
    let first = *frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("discriminator needs at least one frame".into()))?;
    let [batch, c, h, w] = g.value(first).dims4("discriminate_sequence")?;
    if [c, h, w] != [cfg.frame_channels, cfg.frame_height, cfg.frame_width] {
        return Err(Error::geometry(
            "discriminate_sequence",
            format!(
                "frames are {c}×{h}×{w}, discriminator expects {}×{}×{}",
                cfg.frame_channels, cfg.frame_height, cfg.frame_width
            ),
        ));
    }
    let cell_cfg = cfg.cell();
    let cells = (0..cfg.num_layers)
        .map(|i| CellVars::from_bound(params, &format!("disc.cell{i}")))
        .collect::<Result<Vec<_>>>()?;
    let head = params.conv("disc.head")?;
    let mut state = RecurrentState::zeros(g, cfg.num_layers, &cfg.feature_shape(batch));
    let mut logits = Vec::with_capacity(frames.len());
    for &x in frames {
        let (encoded, _) = encode_frame(g, x, params, "disc", cfg.encoder_depth)?;
        let (s_top, _) = state.advance(g, &cell_cfg, &cells, encoded)?;
        let s_mean = g.spatial_mean(s_top)?;
        let t_mean = g.spatial_mean(state.t)?;
        let pooled = g.concat_channels(&[s_mean, t_mean])?;
        logits.push(g.conv2d(pooled, head.w, head.b, 1, 0)?);
    }
    g.concat_channels(&logits)
}

/// Forward-only discriminator over a `B×T×c×H×W` block; returns `B×T` logits.
pub fn discriminate_sequence(params: &ParamStore, frames: &Tensor, cfg: &DiscriminatorConfig) -> Result<Tensor> {
    let shape = frames.shape();
    if shape.len() != 5 {
        return Err(Error::geometry(
            "discriminate_sequence",
            format!("expected B×T×c×H×W block, got {shape:?}"),
        ));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let vars = (0..shape[1])
        .map(|t| Ok(g.constant(frame_at(frames, t)?)))
        .collect::<Result<Vec<_>>>()?;
    let y = discriminate_frames(&mut g, &vars, &bound, cfg)?;
    g.value(y).reshape(&[shape[0], shape[1]])
}
