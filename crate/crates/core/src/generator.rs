//! Sequential frame predictor: encoder stack, stacked recurrent cells with
//! per-layer history windows, pixel attention, and a decoder with additive
//! skips.
//!
//! Step `s` (0-based) consumes frame `s` and produces the prediction for
//! frame `s + 1`. Context frames are always the ground truth; a horizon
//! frame is a per-item blend of ground truth and the model's own earlier
//! prediction, selected by the scheduled-sampling mask. Slot 0 of the output
//! has no prior context and is left at zero.

use rand::Rng;

use crate::cell::{cell_forward, CellConfig, CellInput, CellVars};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const ENC_KERNEL: usize = 3;
pub const DEC_KERNEL: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub num_layers: usize,
    pub hidden_channels: usize,
    pub tau: usize,
    pub context_len: usize,
    pub horizon_len: usize,
    pub frame_channels: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    /// Number of stride-2 encoder stages (and matching decoder stages).
    pub encoder_depth: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_layers: 4,
            hidden_channels: 16,
            tau: 5,
            context_len: 10,
            horizon_len: 10,
            frame_channels: 1,
            frame_height: 16,
            frame_width: 16,
            encoder_depth: 2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_channels", self.hidden_channels),
            ("tau", self.tau),
            ("context_len", self.context_len),
            ("horizon_len", self.horizon_len),
            ("frame_channels", self.frame_channels),
            ("frame_height", self.frame_height),
            ("frame_width", self.frame_width),
            ("encoder_depth", self.encoder_depth),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        let unit = 1usize << self.encoder_depth;
        if self.frame_height % unit != 0 || self.frame_width % unit != 0 {
            return Err(Error::InvalidArgument(format!(
                "frame {}x{} is not divisible by 2^{}",
                self.frame_height, self.frame_width, self.encoder_depth
            )));
        }
        Ok(())
    }

    pub fn cell(&self) -> CellConfig {
        CellConfig::new(self.hidden_channels, self.tau)
    }

    pub fn seq_len(&self) -> usize {
        self.context_len + self.horizon_len
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [self.frame_channels, self.frame_height, self.frame_width]
    }

    /// `B×C×h×w` shape of encoded features.
    pub fn feature_shape(&self, batch: usize) -> [usize; 4] {
        let f = 1 << self.encoder_depth;
        [batch, self.hidden_channels, self.frame_height / f, self.frame_width / f]
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        init_encoder(&mut store, "gen", self.frame_channels, self.hidden_channels, self.encoder_depth, rng);
        for i in 0..self.num_layers {
            self.cell().init_params(&mut store, &format!("gen.cell{i}"), rng);
        }
        let (c, hc) = (self.frame_channels, self.hidden_channels);
        for k in 0..self.encoder_depth {
            let out = if k == 0 { c } else { hc };
            store.init_conv_transpose(&format!("gen.dec{k}"), hc, out, DEC_KERNEL, 2, rng);
        }
        store.init_conv("gen.out", c, c, 3, rng);
        store
    }
}

pub(crate) fn init_encoder<R: Rng + ?Sized>(
    store: &mut ParamStore,
    net: &str,
    in_ch: usize,
    hidden: usize,
    depth: usize,
    rng: &mut R,
) {
    for k in 0..depth {
        let cin = if k == 0 { in_ch } else { hidden };
        store.init_conv(&format!("{net}.enc{k}"), hidden, cin, ENC_KERNEL, rng);
    }
}

/// Encoder stack: stride-2 3×3 convs, each followed by leaky ReLU. Returns
/// the final feature and the input of every stage (the decoder's skips).
pub fn encode_frame(g: &mut Graph, x: Var, params: &Bound, net: &str, depth: usize) -> Result<(Var, Vec<Var>)> {
    let mut h = x;
    let mut skips = Vec::with_capacity(depth);
    for k in 0..depth {
        skips.push(h);
        let cv = params.conv(&format!("{net}.enc{k}"))?;
        let z = g
            .conv2d(h, cv.w, cv.b, 2, 1)
            .map_err(|e| e.in_stage(format!("encoder stage {k}")))?;
        h = g.leaky_relu(z);
    }
    Ok((h, skips))
}

/// Decoder stack mirroring [`encode_frame`]: stride-2 4×4 transposed convs
/// plus the matching skip, leaky ReLU on all but the last stage, then a 3×3
/// conv and sigmoid.
pub fn decode_features(g: &mut Graph, s: Var, skips: &[Var], params: &Bound) -> Result<Var> {
    let mut h = s;
    for k in (0..skips.len()).rev() {
        let cv = params.conv(&format!("gen.dec{k}"))?;
        let up = g
            .conv_transpose2d(h, cv.w, cv.b, 2, 1)
            .map_err(|e| e.in_stage(format!("decoder stage {k}")))?;
        let joined = g.add(up, skips[k]).map_err(|e| e.in_stage(format!("decoder skip {k}")))?;
        h = if k > 0 { g.leaky_relu(joined) } else { joined };
    }
    let cv = params.conv("gen.out")?;
    let z = g.conv2d(h, cv.w, cv.b, 1, 1).map_err(|e| e.in_stage("decoder output"))?;
    Ok(g.sigmoid(z))
}

/// Per-coordinate squared difference of consecutive encoded features.
pub fn pixel_attention(g: &mut Graph, s_t: Var, s_prev: Var) -> Result<Var> {
    let d = g.sub(s_t, s_prev).map_err(|e| e.in_stage("pixel attention"))?;
    g.mul(d, d)
}

/// Scheduled-sampling probability after `iteration` steps of linear decay.
pub fn eta_decay(eta: f64, rate: f64, iteration: u64) -> f64 {
    (eta - rate * iteration as f64).max(0.0)
}

/// Per (batch item, horizon step) ground-truth indicator.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    batch: usize,
    horizon: usize,
    values: Vec<f64>,
}

impl SamplingMask {
    /// Independent Bernoulli(`eta`) draws.
    pub fn sample<R: Rng + ?Sized>(eta: f64, horizon: usize, batch: usize, rng: &mut R) -> Self {
        let p = eta.clamp(0.0, 1.0);
        let values = (0..batch * horizon)
            .map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 })
            .collect();
        SamplingMask { batch, horizon, values }
    }

    pub fn constant(value: bool, horizon: usize, batch: usize) -> Self {
        SamplingMask {
            batch,
            horizon,
            values: vec![if value { 1.0 } else { 0.0 }; batch * horizon],
        }
    }

    pub fn from_values(batch: usize, horizon: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != batch * horizon || values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!(
                "mask needs {} values in {{0,1}}",
                batch * horizon
            )));
        }
        Ok(SamplingMask { batch, horizon, values })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn get(&self, item: usize, step: usize) -> f64 {
        self.values[item * self.horizon + step]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column `step` across the batch.
    pub fn column(&self, step: usize) -> Vec<f64> {
        (0..self.batch).map(|b| self.get(b, step)).collect()
    }
}

/// Frame `index` of every sequence in a `B×F×c×H×W` block, as `B×c×H×W`.
pub fn frame_at(frames: &Tensor, index: usize) -> Result<Tensor> {
    let shape = frames.shape();
    if shape.len() != 5 || index >= shape[1] {
        return Err(Error::InvalidArgument(format!(
            "frame {index} not available in block of shape {shape:?}"
        )));
    }
    let (b, f) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let mut out = Vec::with_capacity(b * inner);
    for bi in 0..b {
        out.extend_from_slice(&frames.data()[(bi * f + index) * inner..][..inner]);
    }
    Tensor::new(&[b, shape[2], shape[3], shape[4]], out)
}

/// Inverse of [`frame_at`]: stacks `B×c×H×W` frames into `B×F×c×H×W`.
pub fn stack_frames(frames: &[Tensor]) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("no frames to stack".into()))?;
    let [b, c, h, w] = first.dims4("stack_frames")?;
    let f = frames.len();
    let inner = c * h * w;
    let mut out = vec![0.0; b * f * inner];
    for (fi, fr) in frames.iter().enumerate() {
        first.same_shape(fr, "stack_frames")?;
        for bi in 0..b {
            out[(bi * f + fi) * inner..][..inner].copy_from_slice(&fr.data()[bi * inner..][..inner]);
        }
    }
    Tensor::new(&[b, f, c, h, w], out)
}

/// Recurrent state threaded through a sequence.
#[derive(Clone, Debug)]
pub struct RecurrentState {
    pub t: Var,
    pub t_pre: Vec<Vec<Var>>,
    pub s_pre: Vec<Vec<Var>>,
    pub s_prev: Var,
}

impl RecurrentState {
    /// Zero temporal state, zero previous feature, and one zero entry in
    /// every history window.
    pub fn zeros(g: &mut Graph, num_layers: usize, feature_shape: &[usize]) -> Self {
        let z = g.constant(Tensor::zeros(feature_shape));
        RecurrentState {
            t: z,
            t_pre: vec![vec![z]; num_layers],
            s_pre: vec![vec![z]; num_layers],
            s_prev: z,
        }
    }

    /// Runs pixel attention and the cell stack on one encoded feature.
    /// Returns the top layer's spatial output and the pixel attention map.
    pub fn advance(
        &mut self,
        g: &mut Graph,
        cfg: &CellConfig,
        cells: &[CellVars],
        encoded: Var,
    ) -> Result<(Var, Var)> {
        let pix = pixel_attention(g, encoded, self.s_prev)?;
        self.s_prev = encoded;
        let mut s = encoded;
        for (i, cell) in cells.iter().enumerate() {
            let out = cell_forward(
                g,
                cfg,
                CellInput {
                    t: self.t,
                    s,
                    t_att: &self.t_pre[i],
                    s_att: &self.s_pre[i],
                    s_pixel_att: pix,
                },
                cell,
            )
            .map_err(|e| e.in_stage(format!("layer {i}")))?;
            self.t = out.out_t;
            s = out.out_s;
            push_window(&mut self.t_pre[i], out.out_t, cfg.tau);
            push_window(&mut self.s_pre[i], out.out_s, cfg.tau);
        }
        Ok((s, pix))
    }
}

fn push_window(window: &mut Vec<Var>, v: Var, tau: usize) {
    window.push(v);
    if window.len() > tau {
        window.remove(0);
    }
}

/// Graph outputs of one sequence rollout.
#[derive(Clone, Debug)]
pub struct Rollout {
    /// `T+H` frames; slot 0 is a zero frame, slot `t` predicts frame `t`.
    pub predictions: Vec<Var>,
    /// Pixel attention computed at each step (one per consumed frame).
    pub pixel_attention: Vec<Var>,
    /// History window lengths per layer after each step.
    pub window_lengths: Vec<Vec<usize>>,
}

impl Rollout {
    /// Horizon predictions (slots `T..T+H`).
    pub fn horizon<'a>(&'a self, cfg: &GeneratorConfig) -> &'a [Var] {
        &self.predictions[cfg.context_len..]
    }
}

fn check_block(frames: &Tensor, cfg: &GeneratorConfig) -> Result<usize> {
    let shape = frames.shape();
    let [c, h, w] = cfg.frame_shape();
    if shape.len() != 5 || shape[1] != cfg.seq_len() || shape[2..] != [c, h, w] {
        return Err(Error::geometry(
            "predict_sequence",
            format!(
                "expected B×{}×{c}×{h}×{w} frames, got {shape:?}",
                cfg.seq_len()
            ),
        ));
    }
    Ok(shape[0])
}

/// Records a full rollout on `g`, with parameters already bound.
pub fn predict_sequence(
    g: &mut Graph,
    frames: &Tensor,
    mask: &SamplingMask,
    params: &Bound,
    cfg: &GeneratorConfig,
) -> Result<Rollout> {
    cfg.validate()?;
    let batch = check_block(frames, cfg)?;
    if mask.batch() != batch || mask.horizon() != cfg.horizon_len {
        return Err(Error::InvalidArgument(format!(
            "mask is {}×{}, sequence needs {batch}×{}",
            mask.batch(),
            mask.horizon(),
            cfg.horizon_len
        )));
    }
    let cell_cfg = cfg.cell();
    let cells = (0..cfg.num_layers)
        .map(|i| CellVars::from_bound(params, &format!("gen.cell{i}")))
        .collect::<Result<Vec<_>>>()?;
    let mut state = RecurrentState::zeros(g, cfg.num_layers, &cfg.feature_shape(batch));

    let [c, h, w] = cfg.frame_shape();
    let zero_frame = g.constant(Tensor::zeros(&[batch, c, h, w]));
    let mut predictions = vec![zero_frame];
    let mut pixel_att = Vec::new();
    let mut window_lengths = Vec::new();
    for step in 0..cfg.seq_len() - 1 {
        let truth = g.constant(frame_at(frames, step)?);
        let input = if step < cfg.context_len {
            truth
        } else {
            let m = mask.column(step - cfg.context_len);
            let inv: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
            let a = g.batch_scale(truth, &m)?;
            let b = g.batch_scale(predictions[step], &inv)?;
            g.add(a, b)?
        };
        let (encoded, skips) = encode_frame(g, input, params, "gen", cfg.encoder_depth)?;
        let (top, pix) = state.advance(g, &cell_cfg, &cells, encoded)?;
        pixel_att.push(pix);
        window_lengths.push(state.t_pre.iter().map(Vec::len).collect());
        predictions.push(decode_features(g, top, &skips, params)?);
    }
    Ok(Rollout {
        predictions,
        pixel_attention: pixel_att,
        window_lengths,
    })
}

/// Forward-only rollout; returns predictions as a `B×(T+H)×c×H×W` block.
pub fn predict(params: &ParamStore, frames: &Tensor, mask: &SamplingMask, cfg: &GeneratorConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let r = predict_sequence(&mut g, frames, mask, &bound, cfg)?;
    let frames: Vec<Tensor> = r.predictions.iter().map(|&v| g.value(v).clone()).collect();
    stack_frames(&frames)
}
