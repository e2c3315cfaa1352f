//! Raw 2-D convolution kernels on flat buffers.
//!
//! Both directions lower to a single GEMM over the whole batch: `im2col`
//! lays patches out as a `(Cin·kH·kW) × (B·H'·W')` matrix and `col2im`
//! scatter-adds it back. The differentiable wrappers live in `graph`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial geometry shared by a convolution and its transpose.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    /// Channels of the "image" side (conv input / transposed-conv output).
    pub img_channels: usize,
    pub img_h: usize,
    pub img_w: usize,
    /// Channels of the "feature" side (conv output / transposed-conv input).
    pub feat_channels: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.img_channels * self.kh * self.kw
    }

    fn columns(&self) -> usize {
        self.batch * self.feat_h * self.feat_w
    }

    /// Geometry of `conv2d(input, weight)`.
    pub fn for_conv(input: &[usize; 4], weight: &[usize; 4], stride: usize, padding: usize) -> Result<Self> {
        let [b, cin, h, w] = *input;
        let [cout, wcin, kh, kw] = *weight;
        if stride == 0 {
            return Err(Error::geometry("conv2d", "stride must be positive"));
        }
        if wcin != cin {
            return Err(Error::geometry(
                "conv2d",
                format!("input has {cin} channels but weight expects {wcin}"),
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::geometry(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding})"),
            ));
        }
        Ok(ConvGeom {
            batch: b,
            img_channels: cin,
            img_h: h,
            img_w: w,
            feat_channels: cout,
            feat_h: (h + 2 * padding - kh) / stride + 1,
            feat_w: (w + 2 * padding - kw) / stride + 1,
            kh,
            kw,
            stride,
            padding,
        })
    }

    /// Geometry of `conv_transpose2d(input, weight)`, where `weight` has the
    /// shape of the conv2d weight it is the adjoint of: `Cin × Cout × kH × kW`
    /// with `Cin` the transposed-conv input channels.
    pub fn for_transpose(input: &[usize; 4], weight: &[usize; 4], stride: usize, padding: usize) -> Result<Self> {
        let [b, cin, h, w] = *input;
        let [wcin, cout, kh, kw] = *weight;
        if stride == 0 {
            return Err(Error::geometry("conv_transpose2d", "stride must be positive"));
        }
        if wcin != cin {
            return Err(Error::geometry(
                "conv_transpose2d",
                format!("input has {cin} channels but weight expects {wcin}"),
            ));
        }
        let out_h = ((h - 1) * stride + kh) as isize - 2 * padding as isize;
        let out_w = ((w - 1) * stride + kw) as isize - 2 * padding as isize;
        if out_h < 1 || out_w < 1 {
            return Err(Error::geometry(
                "conv_transpose2d",
                format!("padding {padding} leaves an empty output for {h}x{w} input and {kh}x{kw} kernel"),
            ));
        }
        Ok(ConvGeom {
            batch: b,
            img_channels: cout,
            img_h: out_h as usize,
            img_w: out_w as usize,
            feat_channels: cin,
            feat_h: h,
            feat_w: w,
            kh,
            kw,
            stride,
            padding,
        })
    }

    pub fn image_shape(&self) -> [usize; 4] {
        [self.batch, self.img_channels, self.img_h, self.img_w]
    }

    pub fn feature_shape(&self) -> [usize; 4] {
        [self.batch, self.feat_channels, self.feat_h, self.feat_w]
    }
}

/// `c (m×n) = a·b (+ c)`, with `a` stored as `m×k` (or `k×m` when
/// `a_trans`) and `b` as `k×n` (or `n×k` when `b_trans`), all row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe exactly the `m×k`, `k×n`, and `m×n`
    // buffers checked above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Image-side tensor to patch matrix `(Cin·kH·kW) × (B·H'·W')`.
fn im2col(img: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.columns();
    let plane = g.feat_h * g.feat_w;
    let mut out = vec![0.0; g.patch_len() * cols];
    for c in 0..g.img_channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let src = &img[(b * g.img_channels + c) * g.img_h * g.img_w..][..g.img_h * g.img_w];
                    for oy in 0..g.feat_h {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.img_h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.img_w..][..g.img_w];
                        let dst = &mut dst_row[b * plane + oy * g.feat_w..][..g.feat_w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.img_w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatter-add of a patch matrix back onto the image side.
fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.columns();
    let plane = g.feat_h * g.feat_w;
    let mut img = vec![0.0; g.batch * g.img_channels * g.img_h * g.img_w];
    for c in 0..g.img_channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src_row = &col[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let dst = &mut img[(b * g.img_channels + c) * g.img_h * g.img_w..][..g.img_h * g.img_w];
                    for oy in 0..g.feat_h {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.img_h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.img_w..][..g.img_w];
                        let src = &src_row[b * plane + oy * g.feat_w..][..g.feat_w];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.img_w as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    img
}

/// `B×C×H×W` to the channel-major matrix `C × (B·H·W)`.
fn to_channel_major(x: &[f64], b: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[ci * b * plane + bi * plane..][..plane].copy_from_slice(&x[(bi * c + ci) * plane..][..plane]);
        }
    }
    out
}

fn from_channel_major(m: &[f64], b: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[(bi * c + ci) * plane..][..plane].copy_from_slice(&m[ci * b * plane + bi * plane..][..plane]);
        }
    }
    out
}

fn add_bias(x: &mut [f64], bias: &[f64], b: usize, plane: usize) {
    let c = bias.len();
    for bi in 0..b {
        for (ci, &bv) in bias.iter().enumerate() {
            for v in &mut x[(bi * c + ci) * plane..][..plane] {
                *v += bv;
            }
        }
    }
}

fn bias_grad(grad: &[f64], b: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for bi in 0..b {
        for (ci, o) in out.iter_mut().enumerate() {
            *o += grad[(bi * c + ci) * plane..][..plane].iter().sum::<f64>();
        }
    }
    out
}

fn check_bias(op: &'static str, bias: &Tensor, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(Error::geometry(
            op,
            format!("bias shape {:?} does not match {channels} output channels", bias.shape()),
        ));
    }
    Ok(())
}

fn weight_dims(op: &'static str, weight: &Tensor) -> Result<[usize; 4]> {
    weight.dims4(op)
}

pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<(Tensor, ConvGeom)> {
    let g = ConvGeom::for_conv(&input.dims4("conv2d")?, &weight_dims("conv2d", weight)?, stride, padding)?;
    check_bias("conv2d", bias, g.feat_channels)?;
    let col = im2col(input.data(), &g);
    let n = g.columns();
    let mut out = vec![0.0; g.feat_channels * n];
    gemm(g.feat_channels, g.patch_len(), n, weight.data(), false, &col, false, &mut out, false);
    let plane = g.feat_h * g.feat_w;
    let mut out = from_channel_major(&out, g.batch, g.feat_channels, plane);
    add_bias(&mut out, bias.data(), g.batch, plane);
    Ok((Tensor::new(&g.feature_shape(), out)?, g))
}

/// Gradients of conv2d wrt the input (when `need_input`) and wrt weight
/// and bias (when `need_params`).
pub fn conv2d_backward(
    grad_out: &[f64],
    input: &[f64],
    weight: &[f64],
    g: &ConvGeom,
    need_input: bool,
    need_params: bool,
) -> (Option<Vec<f64>>, Option<(Vec<f64>, Vec<f64>)>) {
    let plane = g.feat_h * g.feat_w;
    let n = g.columns();
    let k = g.patch_len();
    let gm = to_channel_major(grad_out, g.batch, g.feat_channels, plane);
    let dx = need_input.then(|| {
        let mut dcol = vec![0.0; k * n];
        gemm(k, g.feat_channels, n, weight, true, &gm, false, &mut dcol, false);
        col2im(&dcol, g)
    });
    let dparams = need_params.then(|| {
        let col = im2col(input, g);
        let mut dw = vec![0.0; g.feat_channels * k];
        gemm(g.feat_channels, n, k, &gm, false, &col, true, &mut dw, false);
        (dw, bias_grad(grad_out, g.batch, g.feat_channels, plane))
    });
    (dx, dparams)
}

pub fn conv_transpose2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<(Tensor, ConvGeom)> {
    let g = ConvGeom::for_transpose(
        &input.dims4("conv_transpose2d")?,
        &weight_dims("conv_transpose2d", weight)?,
        stride,
        padding,
    )?;
    check_bias("conv_transpose2d", bias, g.img_channels)?;
    let plane = g.feat_h * g.feat_w;
    let n = g.columns();
    let k = g.patch_len();
    let ym = to_channel_major(input.data(), g.batch, g.feat_channels, plane);
    let mut col = vec![0.0; k * n];
    gemm(k, g.feat_channels, n, weight.data(), true, &ym, false, &mut col, false);
    let mut out = col2im(&col, &g);
    add_bias(&mut out, bias.data(), g.batch, g.img_h * g.img_w);
    Ok((Tensor::new(&g.image_shape(), out)?, g))
}

/// Gradients of conv_transpose2d, split like [`conv2d_backward`].
pub fn conv_transpose2d_backward(
    grad_out: &[f64],
    input: &[f64],
    weight: &[f64],
    g: &ConvGeom,
    need_input: bool,
    need_params: bool,
) -> (Option<Vec<f64>>, Option<(Vec<f64>, Vec<f64>)>) {
    let plane = g.feat_h * g.feat_w;
    let n = g.columns();
    let k = g.patch_len();
    let col = im2col(grad_out, g);
    let dy = need_input.then(|| {
        let mut dym = vec![0.0; g.feat_channels * n];
        gemm(g.feat_channels, k, n, weight, false, &col, false, &mut dym, false);
        from_channel_major(&dym, g.batch, g.feat_channels, plane)
    });
    let dparams = need_params.then(|| {
        let ym = to_channel_major(input, g.batch, g.feat_channels, plane);
        let mut dw = vec![0.0; g.feat_channels * k];
        gemm(g.feat_channels, n, k, &ym, false, &col, true, &mut dw, false);
        (dw, bias_grad(grad_out, g.batch, g.img_channels, g.img_h * g.img_w))
    });
    (dy, dparams)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct sliding-window convolution, independent of the im2col path.
    fn direct_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let [bn, cin, h, wd] = x.dims4("t").unwrap();
        let [cout, _, kh, kw] = w.dims4("t").unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; bn * cout * ho * wo];
        for n in 0..bn {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((n * cin + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((n * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(&[bn, cout, ho, wo], out).unwrap()
    }

    #[test]
    fn ones_kernel_sums_window() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let w = Tensor::ones(&[1, 1, 2, 2]);
        let (y, _) = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn identity_kernel_copies_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[2, 1, 4, 5], -1.0, 1.0, &mut rng);
        let (y, _) = conv2d_forward(&x, &Tensor::ones(&[1, 1, 1, 1]), &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn strided_padded_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[3], -1.0, 1.0, &mut rng);
        let (y, _) = conv2d_forward(&x, &w, &b, 2, 1).unwrap();
        let want = direct_conv(&x, &w, &b, 2, 1);
        assert_eq!(y.shape(), &[1, 3, 3, 3]);
        assert!(y.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn oversized_kernel_rejected() {
        let x = Tensor::ones(&[1, 1, 2, 2]);
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let err = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), 1, 0).unwrap_err();
        assert!(err.to_string().contains("larger than padded input"));
        assert!(conv2d_forward(&x, &w, &Tensor::zeros(&[1]), 1, 1).is_ok());
    }

    #[test]
    fn transpose_overlap_add() {
        // Stride 2 with a 2×2 kernel tiles the output without overlap.
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = conv_transpose2d_forward(&x, &Tensor::ones(&[1, 1, 2, 2]), &Tensor::zeros(&[1]), 2, 0).unwrap();
        let want = [
            1.0, 1.0, 2.0, 2.0, //
            1.0, 1.0, 2.0, 2.0, //
            3.0, 3.0, 4.0, 4.0, //
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(y.data(), &want);

        // Stride 1 overlaps: each output sums the inputs whose 2×2 footprint covers it.
        let (y, _) = conv_transpose2d_forward(&x, &Tensor::ones(&[1, 1, 2, 2]), &Tensor::zeros(&[1]), 1, 0).unwrap();
        let want = [1.0, 3.0, 2.0, 4.0, 10.0, 6.0, 3.0, 7.0, 4.0];
        assert_eq!(y.data(), &want);
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (2, 1, 4), (2, 0, 2), (3, 2, 5)] {
            // Sizes chosen so the strided windows tile the padded input exactly.
            let h = 4 * stride + k - 2 * pad;
            let w_ = 3 * stride + k - 2 * pad;
            let x = Tensor::uniform(&[2, 3, h, w_], -1.0, 1.0, &mut rng);
            let w = Tensor::uniform(&[4, 3, k, k], -1.0, 1.0, &mut rng);
            let (cx, _) = conv2d_forward(&x, &w, &Tensor::zeros(&[4]), stride, pad).unwrap();
            let y = Tensor::uniform(cx.shape(), -1.0, 1.0, &mut rng);
            let (ty, _) = conv_transpose2d_forward(&y, &w, &Tensor::zeros(&[3]), stride, pad).unwrap();
            assert_eq!(ty.shape(), x.shape());
            let lhs = cx.dot(&y).unwrap();
            let rhs = x.dot(&ty).unwrap();
            assert!((lhs - rhs).abs() < 1e-10, "stride {stride} pad {pad} k {k}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn pointwise_transpose_is_channel_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[1, 3, 2, 2], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[3, 2, 1, 1], -1.0, 1.0, &mut rng);
        let (y, _) = conv_transpose2d_forward(&x, &w, &Tensor::zeros(&[2]), 1, 0).unwrap();
        for co in 0..2 {
            for p in 0..4 {
                let want: f64 = (0..3).map(|ci| w.data()[ci * 2 + co] * x.data()[ci * 4 + p]).sum();
                assert!((y.data()[co * 4 + p] - want).abs() < 1e-14);
            }
        }
    }
}
