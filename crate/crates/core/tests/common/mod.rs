//! Independent reference implementations shared by the integration tests.
//!
//! Everything here works on plain `Vec<f64>` buffers with direct loops and
//! never calls into the graph, conv, or metrics modules.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use mau_core::cell::{cell_forward, CellConfig, CellInput, CellVars};
use mau_core::generator::GeneratorConfig;
use mau_core::params::{ConvVars, ParamStore};
use mau_core::{Graph, Tensor, Var};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.2 * x
    }
}

/// A `c×h×w` feature map of one batch item.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Map { c, h, w, v: vec![0.0; c * h * w] }
    }

    pub fn at(&self, c: usize, i: usize, j: usize) -> f64 {
        self.v[(c * self.h + i) * self.w + j]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Map {
        Map { v: self.v.iter().map(|&x| f(x)).collect(), ..self.clone() }
    }

    pub fn zip(&self, o: &Map, f: impl Fn(f64, f64) -> f64) -> Map {
        assert_eq!((self.c, self.h, self.w), (o.c, o.h, o.w));
        Map { v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(), ..self.clone() }
    }

    pub fn channels(&self, start: usize, len: usize) -> Map {
        let plane = self.h * self.w;
        Map { c: len, h: self.h, w: self.w, v: self.v[start * plane..(start + len) * plane].to_vec() }
    }
}

/// Cross-correlation with weight `[cout, cin, k, k]`, zero padding.
pub fn conv(x: &Map, weight: &[f64], bias: &[f64], cout: usize, k: usize, stride: usize, pad: usize) -> Map {
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut out = Map::zeros(cout, oh, ow);
    for o in 0..cout {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = bias[o];
                for c in 0..x.c {
                    for a in 0..k {
                        for b in 0..k {
                            let r = (i * stride + a) as isize - pad as isize;
                            let q = (j * stride + b) as isize - pad as isize;
                            if r >= 0 && q >= 0 && (r as usize) < x.h && (q as usize) < x.w {
                                acc += weight[((o * x.c + c) * k + a) * k + b] * x.at(c, r as usize, q as usize);
                            }
                        }
                    }
                }
                out.v[(o * oh + i) * ow + j] = acc;
            }
        }
    }
    out
}

/// Transposed convolution with weight `[cin, cout, k, k]`: every input pixel
/// scatters a weighted kernel into the output.
pub fn conv_transpose(x: &Map, weight: &[f64], bias: &[f64], cout: usize, k: usize, stride: usize, pad: usize) -> Map {
    let oh = (x.h - 1) * stride + k - 2 * pad;
    let ow = (x.w - 1) * stride + k - 2 * pad;
    let mut out = Map::zeros(cout, oh, ow);
    for o in 0..cout {
        for p in 0..oh * ow {
            out.v[o * oh * ow + p] = bias[o];
        }
    }
    for c in 0..x.c {
        for i in 0..x.h {
            for j in 0..x.w {
                let xv = x.at(c, i, j);
                for o in 0..cout {
                    for a in 0..k {
                        for b in 0..k {
                            let r = (i * stride + a) as isize - pad as isize;
                            let q = (j * stride + b) as isize - pad as isize;
                            if r >= 0 && q >= 0 && (r as usize) < oh && (q as usize) < ow {
                                out.v[(o * oh + r as usize) * ow + q as usize] +=
                                    weight[((c * cout + o) * k + a) * k + b] * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn p<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
    store.get(name).unwrap().data()
}

fn conv_named(store: &ParamStore, prefix: &str, x: &Map, stride: usize, pad: usize) -> Map {
    let w = store.get(&format!("{prefix}.w")).unwrap();
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    conv(x, w.data(), p(store, &format!("{prefix}.b")), cout, k, stride, pad)
}

/// Scalar transcription of the cell for the single-pixel configuration with
/// 1×1 convolutions. `p` packs, in order: s_next (w, b), t_next (w, b),
/// t_fusion weights (4) and biases (4), s_fusion weights (4) and biases
/// (4), raw alpha_t, raw alpha_s.
pub fn scalar_cell(p: &[f64; 22], t: f64, s: f64, t_att: &[f64], s_att: &[f64], pix: f64) -> (f64, f64) {
    let s_next = p[0] * s + p[1];
    let t_next = p[2] * t + p[3];
    let scores: Vec<f64> = s_att.iter().map(|a| a * s_next).collect();
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|x| (x - top).exp()).collect();
    let z: f64 = e.iter().sum();
    let t_trend: f64 = e.iter().zip(t_att).map(|(e, t)| e / z * t).sum();
    let gate = sigmoid(t_next);
    let t_fusion = t * gate + (1.0 - gate) * t_trend;
    let s_fusion = s * sigmoid(pix);
    let tf: Vec<f64> = (0..4).map(|i| p[4 + i] * t_fusion + p[8 + i]).collect();
    let sf: Vec<f64> = (0..4).map(|i| p[12 + i] * s_fusion + p[16 + i]).collect();
    let t_new = sigmoid(tf[1]) * tf[0].tanh() + sigmoid(sf[2]) * t_fusion;
    let s_new = sigmoid(sf[1]) * sf[0].tanh() + sigmoid(tf[3]) * s_fusion;
    let (at, a_s) = (sigmoid(p[20]), sigmoid(p[21]));
    (at * t_new + (1.0 - at) * t_fusion, a_s * s_new + (1.0 - a_s) * s_fusion)
}

/// Cell parameters of [`scalar_cell`] as a store under `prefix`.
pub fn scalar_cell_store(p: &[f64; 22], prefix: &str) -> ParamStore {
    let mut s = ParamStore::new();
    let mut put = |name: &str, shape: &[usize], v: &[f64]| {
        s.insert(format!("{prefix}.{name}"), Tensor::new(shape, v.to_vec()).unwrap());
    };
    put("conv_s_next.w", &[1, 1, 1, 1], &p[0..1]);
    put("conv_s_next.b", &[1], &p[1..2]);
    put("conv_t_next.w", &[1, 1, 1, 1], &p[2..3]);
    put("conv_t_next.b", &[1], &p[3..4]);
    put("conv_t_fusion.w", &[4, 1, 1, 1], &p[4..8]);
    put("conv_t_fusion.b", &[4], &p[8..12]);
    put("conv_s_fusion.w", &[4, 1, 1, 1], &p[12..16]);
    put("conv_s_fusion.b", &[4], &p[16..20]);
    put("raw_alpha_t", &[], &p[20..21]);
    put("raw_alpha_s", &[], &p[21..22]);
    s
}

/// Map-level cell step; returns `(out_t, out_s)`.
pub fn cell_step(store: &ParamStore, prefix: &str, t: &Map, s: &Map, t_att: &[Map], s_att: &[Map], pix: &Map) -> (Map, Map) {
    let k = store.get(&format!("{prefix}.conv_s_next.w")).unwrap().shape()[2];
    let pad = k / 2;
    let c = t.c;
    let s_next = conv_named(store, &format!("{prefix}.conv_s_next"), s, 1, pad);
    let t_next = conv_named(store, &format!("{prefix}.conv_t_next"), t, 1, pad);
    let plane = t.h * t.w;
    let mut t_trend = Map::zeros(c, t.h, t.w);
    for q in 0..plane {
        let scores: Vec<f64> = s_att
            .iter()
            .map(|a| (0..c).map(|ch| a.v[ch * plane + q] * s_next.v[ch * plane + q]).sum::<f64>() / (c as f64).sqrt())
            .collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|x| (x - top).exp()).collect();
        let z: f64 = e.iter().sum();
        for ch in 0..c {
            t_trend.v[ch * plane + q] = e.iter().zip(t_att).map(|(e, ta)| e / z * ta.v[ch * plane + q]).sum();
        }
    }
    let gate = t_next.map(sigmoid);
    let t_fusion = Map {
        v: (0..t.v.len()).map(|i| t.v[i] * gate.v[i] + (1.0 - gate.v[i]) * t_trend.v[i]).collect(),
        ..t.clone()
    };
    let s_fusion = s.zip(pix, |a, b| a * sigmoid(b));
    let tf = conv_named(store, &format!("{prefix}.conv_t_fusion"), &t_fusion, 1, pad);
    let sf = conv_named(store, &format!("{prefix}.conv_s_fusion"), &s_fusion, 1, pad);
    let (ti, tr, ts) = (tf.channels(0, c).map(f64::tanh), tf.channels(c, c).map(sigmoid), tf.channels(3 * c, c).map(sigmoid));
    let (si, sr, st) = (sf.channels(0, c).map(f64::tanh), sf.channels(c, c).map(sigmoid), sf.channels(2 * c, c).map(sigmoid));
    let n = t.v.len();
    let t_new: Vec<f64> = (0..n).map(|i| tr.v[i] * ti.v[i] + st.v[i] * t_fusion.v[i]).collect();
    let s_new: Vec<f64> = (0..n).map(|i| sr.v[i] * si.v[i] + ts.v[i] * s_fusion.v[i]).collect();
    let at = sigmoid(p(store, &format!("{prefix}.raw_alpha_t"))[0]);
    let a_s = sigmoid(p(store, &format!("{prefix}.raw_alpha_s"))[0]);
    let out_t = Map { v: (0..n).map(|i| at * t_new[i] + (1.0 - at) * t_fusion.v[i]).collect(), ..t.clone() };
    let out_s = Map { v: (0..n).map(|i| a_s * s_new[i] + (1.0 - a_s) * s_fusion.v[i]).collect(), ..s.clone() };
    (out_t, out_s)
}

/// Straight-line generator rollout for one sequence of frames (each a
/// `c×H×W` map). `mask[k]` selects ground truth (1) or the previous
/// prediction (0) for horizon step `k`. Returns all `T+H` prediction slots.
pub fn generator_rollout(store: &ParamStore, cfg: &GeneratorConfig, frames: &[Map], mask: &[f64]) -> Vec<Map> {
    let c = cfg.hidden_channels;
    let fh = cfg.frame_height >> cfg.encoder_depth;
    let fw = cfg.frame_width >> cfg.encoder_depth;
    let zero = Map::zeros(c, fh, fw);
    let mut t_state = zero.clone();
    let mut t_pre = vec![vec![zero.clone()]; cfg.num_layers];
    let mut s_pre = vec![vec![zero.clone()]; cfg.num_layers];
    let mut s_prev = zero;
    let mut preds = vec![Map::zeros(cfg.frame_channels, cfg.frame_height, cfg.frame_width)];
    for step in 0..cfg.context_len + cfg.horizon_len - 1 {
        let input = if step < cfg.context_len {
            frames[step].clone()
        } else {
            let m = mask[step - cfg.context_len];
            frames[step].zip(&preds[step], |x, y| m * x + (1.0 - m) * y)
        };
        let mut skips = Vec::new();
        let mut h = input;
        for k in 0..cfg.encoder_depth {
            skips.push(h.clone());
            h = conv_named(store, &format!("gen.enc{k}"), &h, 2, 1).map(leaky);
        }
        let pix = h.zip(&s_prev, |a, b| (a - b) * (a - b));
        s_prev = h.clone();
        let mut s = h;
        for l in 0..cfg.num_layers {
            let (ot, os) = cell_step(store, &format!("gen.cell{l}"), &t_state, &s, &t_pre[l], &s_pre[l], &pix);
            t_pre[l].push(ot.clone());
            s_pre[l].push(os.clone());
            if t_pre[l].len() > cfg.tau {
                t_pre[l].remove(0);
                s_pre[l].remove(0);
            }
            t_state = ot;
            s = os;
        }
        let mut d = s;
        for k in (0..cfg.encoder_depth).rev() {
            let w = store.get(&format!("gen.dec{k}.w")).unwrap();
            let up = conv_transpose(&d, w.data(), p(store, &format!("gen.dec{k}.b")), w.shape()[1], w.shape()[2], 2, 1);
            let joined = up.zip(&skips[k], |a, b| a + b);
            d = if k > 0 { joined.map(leaky) } else { joined };
        }
        preds.push(conv_named(store, "gen.out", &d, 1, 1).map(sigmoid));
    }
    preds
}

/// Mean SSIM by direct weighted sums over every valid window, with centred
/// second moments.
pub fn ssim_windowed(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = if h.min(w) >= 11 { 11 } else { 7 };
    let sigma: f64 = 1.5;
    let c = (k as f64 - 1.0) / 2.0;
    let mut win = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            win[i * k + j] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    let z: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= z);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..=h - k {
        for j in 0..=w - k {
            let at = |img: &[f64], u: usize, v: usize| img[(i + u) * w + j + v];
            let (mut ma, mut mb) = (0.0, 0.0);
            for u in 0..k {
                for v in 0..k {
                    ma += win[u * k + v] * at(a, u, v);
                    mb += win[u * k + v] * at(b, u, v);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for u in 0..k {
                for v in 0..k {
                    let (da, db) = (at(a, u, v) - ma, at(b, u, v) - mb);
                    va += win[u * k + v] * da * da;
                    vb += win[u * k + v] * db * db;
                    cov += win[u * k + v] * da * db;
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Fixed pseudo-random weights so every output coordinate reaches the loss
/// with a distinct coefficient.
pub fn weighted_sum(g: &mut Graph, y: Var) -> mau_core::Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|i| (0.7 * i as f64 + 0.3).sin() + 0.1).collect())?;
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

pub fn part(g: &mut Graph, x: Var, start: usize, shape: &[usize]) -> mau_core::Result<Var> {
    let n = shape.iter().product::<usize>().max(1);
    let s = g.slice_flat(x, start, n)?;
    g.reshape(s, shape)
}

/// Random point of length `n` with every coordinate at least `gap` away
/// from zero, so kinked primitives are checked away from their kink.
pub fn point(n: usize, gap: f64, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(
        (0..n)
            .map(|_| {
                let v: f64 = r.gen_range(gap..1.5);
                if r.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect(),
    )
}

pub type Primitive = Box<dyn Fn(&mut Graph, Var) -> mau_core::Result<Var>>;

pub fn primitives() -> Vec<(&'static str, usize, Primitive)> {
    const S: [usize; 4] = [2, 3, 2, 2];
    let n = 24;
    vec![
        ("add", 2 * n, Box::new(move |g, x| {
            let (a, b) = (part(g, x, 0, &S)?, part(g, x, n, &S)?);
            let y = g.add(a, b)?;
            weighted_sum(g, y)
        })),
        ("sub", 2 * n, Box::new(move |g, x| {
            let (a, b) = (part(g, x, 0, &S)?, part(g, x, n, &S)?);
            let y = g.sub(a, b)?;
            weighted_sum(g, y)
        })),
        ("mul", 2 * n, Box::new(move |g, x| {
            let (a, b) = (part(g, x, 0, &S)?, part(g, x, n, &S)?);
            let y = g.mul(a, b)?;
            weighted_sum(g, y)
        })),
        ("scale", n, Box::new(move |g, x| {
            let a = part(g, x, 0, &S)?;
            let y = g.scale(a, 1.7);
            weighted_sum(g, y)
        })),
        ("affine", n, Box::new(move |g, x| {
            let a = part(g, x, 0, &S)?;
            let y = g.affine(a, -0.6, 0.4);
            weighted_sum(g, y)
        })),
        ("mul_scalar_var", n + 1, Box::new(move |g, x| {
            let a = part(g, x, 0, &S)?;
            let s = part(g, x, n, &[])?;
            let y = g.mul_scalar_var(a, s)?;
            weighted_sum(g, y)
        })),
        ("sigmoid", n, Box::new(move |g, x| {
            let a = part(g, x, 0, &S)?;
            let y = g.sigmoid(a);
            weighted_sum(g, y)
        })),
        ("tanh", n, Box::new(move |g, x| {
            let a = part(g, x, 0, &S)?;
            let y = g.tanh(a);
            weighted_sum(g, y)
        })),
        ("leaky_relu", n, Box::new(move |g, x| {
            let a = part(g, x, 0, &S)?;
            let y = g.leaky_relu(a);
            weighted_sum(g, y)
        })),
        ("abs", n, Box::new(move |g, x| {
            let a = part(g, x, 0, &S)?;
            let y = g.abs(a);
            weighted_sum(g, y)
        })),
        ("conv2d stride 1", 100 + 54 + 3, Box::new(|g, x| {
            let a = part(g, x, 0, &[2, 2, 5, 5])?;
            let w = part(g, x, 100, &[3, 2, 3, 3])?;
            let b = part(g, x, 154, &[3])?;
            let y = g.conv2d(a, w, b, 1, 1)?;
            weighted_sum(g, y)
        })),
        ("conv2d stride 2", 100 + 54 + 3, Box::new(|g, x| {
            let a = part(g, x, 0, &[2, 2, 5, 5])?;
            let w = part(g, x, 100, &[3, 2, 3, 3])?;
            let b = part(g, x, 154, &[3])?;
            let y = g.conv2d(a, w, b, 2, 1)?;
            weighted_sum(g, y)
        })),
        ("conv_transpose2d", 54 + 96 + 2, Box::new(|g, x| {
            let a = part(g, x, 0, &[2, 3, 3, 3])?;
            let w = part(g, x, 54, &[3, 2, 4, 4])?;
            let b = part(g, x, 150, &[2])?;
            let y = g.conv_transpose2d(a, w, b, 2, 1)?;
            weighted_sum(g, y)
        })),
        ("channel_dot", 2 * n, Box::new(move |g, x| {
            let (a, b) = (part(g, x, 0, &S)?, part(g, x, n, &S)?);
            let y = g.channel_dot(a, b)?;
            weighted_sum(g, y)
        })),
        ("channel_weight", n + 8, Box::new(move |g, x| {
            let a = part(g, x, 0, &S)?;
            let w = part(g, x, n, &[2, 1, 2, 2])?;
            let y = g.channel_weight(w, a)?;
            weighted_sum(g, y)
        })),
        ("softmax_over_set", 24, Box::new(|g, x| {
            let scores = (0..3).map(|i| part(g, x, 8 * i, &[2, 1, 2, 2])).collect::<mau_core::Result<Vec<_>>>()?;
            let ws = g.softmax_over_set(&scores)?;
            let mut total = None;
            for (i, w) in ws.into_iter().enumerate() {
                let s = weighted_sum(g, w)?;
                let s = g.scale(s, 1.0 + i as f64);
                total = Some(match total {
                    Some(t) => g.add(t, s)?,
                    None => s,
                });
            }
            Ok(total.unwrap())
        })),
        ("channel_slice", 32, Box::new(|g, x| {
            let a = part(g, x, 0, &[2, 4, 2, 2])?;
            let y = g.channel_slice(a, 1, 2)?;
            weighted_sum(g, y)
        })),
        ("slice_flat", n, Box::new(|g, x| {
            let y = g.slice_flat(x, 5, 11)?;
            weighted_sum(g, y)
        })),
        ("reshape", n, Box::new(|g, x| {
            let y = g.reshape(x, &[4, 6])?;
            weighted_sum(g, y)
        })),
        ("channel_split4", 64, Box::new(|g, x| {
            let a = part(g, x, 0, &[2, 8, 2, 2])?;
            let parts = g.channel_split4(a)?;
            let mut total = weighted_sum(g, parts[0])?;
            for (i, &p) in parts.iter().enumerate().skip(1) {
                let s = weighted_sum(g, p)?;
                let s = g.scale(s, 1.0 + i as f64);
                total = g.add(total, s)?;
            }
            Ok(total)
        })),
        ("concat_channels", n + 16, Box::new(move |g, x| {
            let a = part(g, x, 0, &S)?;
            let b = part(g, x, n, &[2, 2, 2, 2])?;
            let y = g.concat_channels(&[a, b])?;
            weighted_sum(g, y)
        })),
        ("spatial_mean", n, Box::new(move |g, x| {
            let a = part(g, x, 0, &S)?;
            let y = g.spatial_mean(a)?;
            weighted_sum(g, y)
        })),
        ("batch_scale", 24, Box::new(|g, x| {
            let a = part(g, x, 0, &[3, 2, 2, 2])?;
            let y = g.batch_scale(a, &[0.3, -1.2, 2.0])?;
            weighted_sum(g, y)
        })),
        ("sum", n, Box::new(|g, x| {
            let a = g.mul(x, x)?;
            Ok(g.sum(a))
        })),
        ("mean", n, Box::new(|g, x| {
            let a = g.mul(x, x)?;
            Ok(g.mean(a))
        })),
        ("bce_with_logits", 12, Box::new(|g, x| {
            let targets = Tensor::from_vec((0..12).map(|i| (i % 2) as f64).collect());
            g.bce_with_logits(x, &targets)
        })),
    ]
}

/// A 3×3-kernel cell on a single pixel, with every parameter and input read
/// from the flat variable `x`.
pub fn cell_from_flat(g: &mut Graph, x: Var) -> mau_core::Result<Var> {
    let cfg = CellConfig::new(1, 2);
    let mut off = 0;
    let mut take = |g: &mut Graph, shape: &[usize]| {
        let v = part(g, x, off, shape);
        off += shape.iter().product::<usize>().max(1);
        v
    };
    let mut conv = |g: &mut Graph, out: usize| -> mau_core::Result<ConvVars> {
        Ok(ConvVars { w: take(g, &[out, 1, 3, 3])?, b: take(g, &[out])? })
    };
    let p = CellVars {
        conv_s_next: conv(g, 1)?,
        conv_t_next: conv(g, 1)?,
        conv_t_fusion: conv(g, 4)?,
        conv_s_fusion: conv(g, 4)?,
        raw_alpha_t: part(g, x, 100, &[])?,
        raw_alpha_s: part(g, x, 101, &[])?,
    };
    let px: Vec<Var> = (0..7).map(|i| part(g, x, 102 + i, &[1, 1, 1, 1])).collect::<mau_core::Result<_>>()?;
    let out = cell_forward(
        g,
        &cfg,
        CellInput { t: px[0], s: px[1], t_att: &px[2..4], s_att: &px[4..6], s_pixel_att: px[6] },
        &p,
    )?;
    let a = g.scale(out.out_s, 0.7);
    let y = g.add(out.out_t, a)?;
    Ok(g.sum(y))
}
