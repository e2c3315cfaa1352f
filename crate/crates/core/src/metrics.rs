//! Frame-quality metrics: MSE, MAE, PSNR and SSIM, plus per-frame reports.
//!
//! Metric functions treat the last two axes of a tensor as the image plane;
//! any leading axes are independent planes. SSIM is averaged over planes.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR reported for identical frames.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SMALL_WINDOW: usize = 7;

pub fn metric_mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.same_shape(target, "metric_mse")?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.numel() as f64)
}

pub fn metric_mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.same_shape(target, "metric_mae")?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / pred.numel() as f64)
}

/// PSNR in dB for a given MSE, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP)
}

pub fn metric_psnr(pred: &Tensor, target: &Tensor, data_range: f64) -> Result<f64> {
    Ok(psnr_from_mse(metric_mse(pred, target)?, data_range))
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Window size used for an `h×w` frame.
pub fn ssim_window_size(h: usize, w: usize) -> Result<usize> {
    let m = h.min(w);
    if m >= SSIM_WINDOW {
        Ok(SSIM_WINDOW)
    } else if m >= SSIM_SMALL_WINDOW {
        Ok(SSIM_SMALL_WINDOW)
    } else {
        Err(Error::InvalidArgument(format!(
            "metric_ssim: {h}x{w} frame is smaller than the {SSIM_SMALL_WINDOW}x{SSIM_SMALL_WINDOW} window"
        )))
    }
}

fn planes(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::geometry(op, format!("need at least 2 axes, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((t.numel() / (h * w), h, w))
}

/// Valid separable filtering of an `h×w` plane with `taps` along both axes.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().enumerate().map(|(t, c)| c * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps.iter().enumerate().map(|(t, c)| c * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, taps: &[f64]) -> f64 {
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let aa: Vec<f64> = a.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.iter().map(|y| y * y).collect();
    let mu_a = filter_valid(a, h, w, taps);
    let mu_b = filter_valid(b, h, w, taps);
    let e_aa = filter_valid(&aa, h, w, taps);
    let e_bb = filter_valid(&bb, h, w, taps);
    let e_ab = filter_valid(&ab, h, w, taps);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    total / n as f64
}

/// Mean local SSIM at data range 1 with a Gaussian window (σ = 1.5), 11×11
/// or 7×7 for frames smaller than 11 px, averaged over the valid region.
pub fn metric_ssim(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.same_shape(target, "metric_ssim")?;
    let (n, h, w) = planes(pred, "metric_ssim")?;
    let taps = gaussian_window(ssim_window_size(h, w)?, SSIM_SIGMA);
    let plane = h * w;
    let total: f64 = (0..n)
        .map(|p| {
            let r = p * plane..(p + 1) * plane;
            ssim_plane(&pred.data()[r.clone()], &target.data()[r], h, w, &taps)
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMetrics {
    pub sequence: usize,
    /// Absolute index of the frame within its sequence.
    pub frame_index: usize,
    pub mse: f64,
    pub mae: f64,
    pub ssim: f64,
    pub psnr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricMeans {
    pub mse: f64,
    pub mae: f64,
    pub ssim: f64,
    pub psnr: f64,
}

fn means<'a>(rows: impl Iterator<Item = &'a FrameMetrics>) -> MetricMeans {
    let mut m = MetricMeans {
        mse: 0.0,
        mae: 0.0,
        ssim: 0.0,
        psnr: 0.0,
    };
    let mut n = 0usize;
    for r in rows {
        m.mse += r.mse;
        m.mae += r.mae;
        m.ssim += r.ssim;
        m.psnr += r.psnr;
        n += 1;
    }
    let d = n.max(1) as f64;
    MetricMeans {
        mse: m.mse / d,
        mae: m.mae / d,
        ssim: m.ssim / d,
        psnr: m.psnr / d,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<FrameMetrics>,
    pub num_sequences: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "frame_index,mse,mae,ssim,psnr";

    pub fn mean(&self) -> MetricMeans {
        means(self.rows.iter())
    }

    pub fn sequence_means(&self) -> Vec<MetricMeans> {
        (0..self.num_sequences)
            .map(|s| means(self.rows.iter().filter(|r| r.sequence == s)))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.frame_index, r.mse, r.mae, r.ssim, r.psnr);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Scores the horizon frames (indices `context_len..`) of `N×F×c×H×W`
/// predictions against targets.
pub fn evaluate_sequences(pred: &Tensor, target: &Tensor, context_len: usize) -> Result<MetricReport> {
    pred.same_shape(target, "evaluate_sequences")?;
    let s = pred.shape();
    if s.len() != 5 {
        return Err(Error::geometry("evaluate_sequences", format!("expected N×F×c×H×W, got {s:?}")));
    }
    let (n, f) = (s[0], s[1]);
    if context_len >= f {
        return Err(Error::InvalidArgument(format!(
            "evaluate_sequences: context {context_len} leaves no horizon in {f} frames"
        )));
    }
    let frame_len = s[2] * s[3] * s[4];
    let frame_shape = &s[2..];
    let mut rows = Vec::with_capacity(n * (f - context_len));
    for seq in 0..n {
        for t in context_len..f {
            let off = (seq * f + t) * frame_len;
            let p = Tensor::new(frame_shape, pred.data()[off..off + frame_len].to_vec())?;
            let q = Tensor::new(frame_shape, target.data()[off..off + frame_len].to_vec())?;
            let mse = metric_mse(&p, &q)?;
            rows.push(FrameMetrics {
                sequence: seq,
                frame_index: t,
                mse,
                mae: metric_mae(&p, &q)?,
                ssim: metric_ssim(&p, &q)?,
                psnr: psnr_from_mse(mse, 1.0),
            });
        }
    }
    Ok(MetricReport { rows, num_sequences: n })
}
