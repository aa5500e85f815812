//! Forward and backward numerical kernels: 2-D convolution and transposed
//! convolution, batch normalization, activations, and fully-connected layers.
//!
//! Convolution convention: `conv2d` is cross-correlation (no kernel flip),
//! `out[n,f,oh,ow] = bias[f] + sum_{c,kh,kw} in[n,c,oh*s-p+kh,ow*s-p+kw] *
//! w[f,c,kh,kw]` with zero padding. `deconv2d` is defined as its exact
//! adjoint, so `deconv2d` forward equals `conv2d` backward w.r.t. input with
//! shared weights.
//!
//! Weight layouts: conv weights are `[F, C, k, k]` (output major), deconv
//! weights are `[C_in, C_out, k, k]`.
//!
//! All kernels are pure over their inputs; internal parallelism assigns each
//! output plane (or channel) to exactly one task with a sequential inner
//! loop, so results are bitwise identical for any thread count.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

/// Indices `i` in `[0, loop_extent)` such that `0 <= i*stride + off < target_extent`,
/// returned as a half-open range.
fn stride_range(loop_extent: usize, target_extent: usize, off: i64, stride: usize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let max_t = target_extent as i64 - 1 - off;
    if max_t < 0 {
        return (0, 0);
    }
    let hi = ((max_t as usize) / stride).min(loop_extent.saturating_sub(1));
    if lo > hi {
        (0, 0)
    } else {
        (lo, hi + 1)
    }
}

/// dst[n,b,oh,ow] = init + sum_{a,kh,kw} src[n,a,oh*s-p+kh,ow*s-p+kw] * w[b,a,kh,kw]
///
/// Shared by conv2d forward (w = [F,C,k,k]) and deconv2d input gradient
/// (w = [Ci,Co,k,k] read as [dst,src]).
#[allow(clippy::too_many_arguments)]
fn gather2d(
    src: &[f64],
    (n_cnt, a_cnt, hs, ws): (usize, usize, usize, usize),
    w: &[f64],
    (b_cnt, k): (usize, usize),
    stride: usize,
    pad: usize,
    bias: Option<&[f64]>,
    (ho, wo): (usize, usize),
) -> Vec<f64> {
    let mut dst = vec![0.0; n_cnt * b_cnt * ho * wo];
    par::for_each_chunk_mut(&mut dst, ho * wo, |plane, chunk| {
        let n = plane / b_cnt;
        let b = plane % b_cnt;
        if let Some(bias) = bias {
            chunk.fill(bias[b]);
        }
        for a in 0..a_cnt {
            let src_plane = &src[(n * a_cnt + a) * hs * ws..][..hs * ws];
            let w_base = (b * a_cnt + a) * k * k;
            for kh in 0..k {
                let off_h = kh as i64 - pad as i64;
                let (oh_lo, oh_hi) = stride_range(ho, hs, off_h, stride);
                for kw in 0..k {
                    let off_w = kw as i64 - pad as i64;
                    let (ow_lo, ow_hi) = stride_range(wo, ws, off_w, stride);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let wv = w[w_base + kh * k + kw];
                    for oh in oh_lo..oh_hi {
                        let ih = (oh * stride) as i64 + off_h;
                        let src_row = &src_plane[ih as usize * ws..][..ws];
                        let dst_row = &mut chunk[oh * wo..][..wo];
                        let iw0 = ((ow_lo * stride) as i64 + off_w) as usize;
                        if stride == 1 {
                            let len = ow_hi - ow_lo;
                            for (d, s) in dst_row[ow_lo..ow_hi]
                                .iter_mut()
                                .zip(&src_row[iw0..iw0 + len])
                            {
                                *d += wv * s;
                            }
                        } else {
                            let mut iw = iw0;
                            for d in &mut dst_row[ow_lo..ow_hi] {
                                *d += wv * src_row[iw];
                                iw += stride;
                            }
                        }
                    }
                }
            }
        }
    });
    dst
}

/// dst[n,b,ih*s-p+kh,iw*s-p+kw] += src[n,a,ih,iw] * w[a,b,kh,kw]
///
/// Shared by deconv2d forward (w = [Ci,Co,k,k]) and conv2d input gradient
/// (w = [F,C,k,k] read as [src,dst]).
#[allow(clippy::too_many_arguments)]
fn scatter2d(
    src: &[f64],
    (n_cnt, a_cnt, hs, ws): (usize, usize, usize, usize),
    w: &[f64],
    (b_cnt, k): (usize, usize),
    stride: usize,
    pad: usize,
    bias: Option<&[f64]>,
    (hd, wd): (usize, usize),
) -> Vec<f64> {
    let mut dst = vec![0.0; n_cnt * b_cnt * hd * wd];
    par::for_each_chunk_mut(&mut dst, hd * wd, |plane, chunk| {
        let n = plane / b_cnt;
        let b = plane % b_cnt;
        if let Some(bias) = bias {
            chunk.fill(bias[b]);
        }
        for a in 0..a_cnt {
            let src_plane = &src[(n * a_cnt + a) * hs * ws..][..hs * ws];
            let w_base = (a * b_cnt + b) * k * k;
            for kh in 0..k {
                let off_h = kh as i64 - pad as i64;
                let (ih_lo, ih_hi) = stride_range(hs, hd, off_h, stride);
                for kw in 0..k {
                    let off_w = kw as i64 - pad as i64;
                    let (iw_lo, iw_hi) = stride_range(ws, wd, off_w, stride);
                    if iw_lo >= iw_hi {
                        continue;
                    }
                    let wv = w[w_base + kh * k + kw];
                    for ih in ih_lo..ih_hi {
                        let oh = ((ih * stride) as i64 + off_h) as usize;
                        let src_row = &src_plane[ih * ws..][..ws];
                        let dst_row = &mut chunk[oh * wd..][..wd];
                        let ow0 = ((iw_lo * stride) as i64 + off_w) as usize;
                        if stride == 1 {
                            let len = iw_hi - iw_lo;
                            for (d, s) in dst_row[ow0..ow0 + len]
                                .iter_mut()
                                .zip(&src_row[iw_lo..iw_hi])
                            {
                                *d += wv * s;
                            }
                        } else {
                            let mut ow = ow0;
                            for s in &src_row[iw_lo..iw_hi] {
                                dst_row[ow] += wv * s;
                                ow += stride;
                            }
                        }
                    }
                }
            }
        }
    });
    dst
}

/// gw[a,b,kh,kw] = sum_{n,oh,ow} p[n,a,oh,ow] * q[n,b,oh*s-p+kh,ow*s-p+kw]
///
/// Conv weight gradient uses (p = grad_out [N,F,..], q = input [N,C,..]);
/// deconv weight gradient uses (p = input [N,Ci,..], q = grad_out [N,Co,..]).
fn weight_grad2d(
    p_src: &[f64],
    (n_cnt, a_cnt, hp, wp): (usize, usize, usize, usize),
    q_src: &[f64],
    (b_cnt, hq, wq): (usize, usize, usize),
    stride: usize,
    pad: usize,
    k: usize,
) -> Vec<f64> {
    let mut gw = vec![0.0; a_cnt * b_cnt * k * k];
    par::for_each_chunk_mut(&mut gw, b_cnt * k * k, |a, chunk| {
        for n in 0..n_cnt {
            let p_plane = &p_src[(n * a_cnt + a) * hp * wp..][..hp * wp];
            for b in 0..b_cnt {
                let q_plane = &q_src[(n * b_cnt + b) * hq * wq..][..hq * wq];
                for kh in 0..k {
                    let off_h = kh as i64 - pad as i64;
                    let (oh_lo, oh_hi) = stride_range(hp, hq, off_h, stride);
                    for kw in 0..k {
                        let off_w = kw as i64 - pad as i64;
                        let (ow_lo, ow_hi) = stride_range(wp, wq, off_w, stride);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = ((oh * stride) as i64 + off_h) as usize;
                            let p_row = &p_plane[oh * wp..][..wp];
                            let q_row = &q_plane[ih * wq..][..wq];
                            let iw0 = ((ow_lo * stride) as i64 + off_w) as usize;
                            if stride == 1 {
                                let len = ow_hi - ow_lo;
                                acc += p_row[ow_lo..ow_hi]
                                    .iter()
                                    .zip(&q_row[iw0..iw0 + len])
                                    .map(|(x, y)| x * y)
                                    .sum::<f64>();
                            } else {
                                let mut iw = iw0;
                                for x in &p_row[ow_lo..ow_hi] {
                                    acc += x * q_row[iw];
                                    iw += stride;
                                }
                            }
                        }
                        chunk[(b * k + kh) * k + kw] += acc;
                    }
                }
            }
        }
    });
    gw
}

fn check_square_kernel(weight: &Tensor, what: &str) -> Result<usize> {
    let s = weight.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::shape(what, "[A,B,k,k] square kernel", format!("{s:?}")));
    }
    Ok(s[2])
}

/// Cross-correlation with zero padding. Output spatial size is
/// `floor((H + 2*pad - k)/stride) + 1`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let k = check_square_kernel(weight, "conv2d weight")?;
    let f = weight.shape()[0];
    if weight.shape()[1] != c {
        return Err(Error::shape(
            "conv2d input channels vs weight channels",
            weight.shape()[1],
            c,
        ));
    }
    if stride < 1 {
        return Err(Error::Config("conv2d stride must be >= 1".into()));
    }
    if k > h + 2 * pad || k > w + 2 * pad {
        return Err(Error::shape(
            "conv2d kernel vs padded input",
            format!("k <= {}x{}", h + 2 * pad, w + 2 * pad),
            k,
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [f] {
            return Err(Error::shape("conv2d bias", format!("[{f}]"), format!("{:?}", b.shape())));
        }
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let data = gather2d(
        input.data(),
        (n, c, h, w),
        weight.data(),
        (f, k),
        stride,
        pad,
        bias.map(|b| b.data()),
        (ho, wo),
    );
    Tensor::new(vec![n, f, ho, wo], data)
}

/// Gradient of `conv2d` w.r.t. its input. The input spatial size must be
/// supplied because the forward floor can discard trailing rows/columns.
pub fn conv2d_input_grad(
    grad_out: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    (h, w): (usize, usize),
) -> Result<Tensor> {
    let (n, f, ho, wo) = grad_out.dims4()?;
    let k = check_square_kernel(weight, "conv2d weight")?;
    if weight.shape()[0] != f {
        return Err(Error::shape("conv2d grad channels", weight.shape()[0], f));
    }
    let c = weight.shape()[1];
    let data = scatter2d(
        grad_out.data(),
        (n, f, ho, wo),
        weight.data(),
        (c, k),
        stride,
        pad,
        None,
        (h, w),
    );
    Tensor::new(vec![n, c, h, w], data)
}

/// Gradient of `conv2d` w.r.t. its weight, freshly allocated (callers add it
/// into their accumulation buffers).
pub fn conv2d_weight_grad(
    input: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    k: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let (n2, f, ho, wo) = grad_out.dims4()?;
    if n != n2 {
        return Err(Error::shape("conv2d weight grad batch", n, n2));
    }
    let data = weight_grad2d(
        grad_out.data(),
        (n, f, ho, wo),
        input.data(),
        (c, h, w),
        stride,
        pad,
        k,
    );
    Tensor::new(vec![f, c, k, k], data)
}

/// Transposed convolution: the exact adjoint of `conv2d`. Output spatial size
/// is `(H - 1)*stride - 2*pad + k`. Weight layout is `[C_in, C_out, k, k]`.
pub fn deconv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (n, ci, h, w) = input.dims4()?;
    let k = check_square_kernel(weight, "deconv2d weight")?;
    if weight.shape()[0] != ci {
        return Err(Error::shape(
            "deconv2d input channels vs weight channels",
            weight.shape()[0],
            ci,
        ));
    }
    let co = weight.shape()[1];
    if stride < 1 {
        return Err(Error::Config("deconv2d stride must be >= 1".into()));
    }
    let ho = ((h - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0);
    let wo = ((w - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0);
    let (ho, wo) = match (ho, wo) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::shape(
                "deconv2d output extent",
                "positive (H-1)*stride - 2*pad + k",
                "<= 0",
            ))
        }
    };
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(Error::shape("deconv2d bias", format!("[{co}]"), format!("{:?}", b.shape())));
        }
    }
    let data = scatter2d(
        input.data(),
        (n, ci, h, w),
        weight.data(),
        (co, k),
        stride,
        pad,
        bias.map(|b| b.data()),
        (ho, wo),
    );
    Tensor::new(vec![n, co, ho, wo], data)
}

/// Gradient of `deconv2d` w.r.t. its input.
pub fn deconv2d_input_grad(
    grad_out: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    (h, w): (usize, usize),
) -> Result<Tensor> {
    let (n, co, ho, wo) = grad_out.dims4()?;
    let k = check_square_kernel(weight, "deconv2d weight")?;
    if weight.shape()[1] != co {
        return Err(Error::shape("deconv2d grad channels", weight.shape()[1], co));
    }
    let ci = weight.shape()[0];
    let data = gather2d(
        grad_out.data(),
        (n, co, ho, wo),
        weight.data(),
        (ci, k),
        stride,
        pad,
        None,
        (h, w),
    );
    Tensor::new(vec![n, ci, h, w], data)
}

/// Gradient of `deconv2d` w.r.t. its weight.
pub fn deconv2d_weight_grad(
    input: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    k: usize,
) -> Result<Tensor> {
    let (n, ci, h, w) = input.dims4()?;
    let (n2, co, ho, wo) = grad_out.dims4()?;
    if n != n2 {
        return Err(Error::shape("deconv2d weight grad batch", n, n2));
    }
    let data = weight_grad2d(
        input.data(),
        (n, ci, h, w),
        grad_out.data(),
        (co, ho, wo),
        stride,
        pad,
        k,
    );
    Tensor::new(vec![ci, co, k, k], data)
}

/// Per-output-channel sum of `grad_out` over batch and spatial dims.
pub fn bias_grad(grad_out: &Tensor) -> Result<Vec<f64>> {
    let (n, f, h, w) = grad_out.dims4()?;
    let plane = h * w;
    Ok(par::map_indexed(f, |ch| {
        let mut acc = 0.0;
        for b in 0..n {
            let p = &grad_out.data()[(b * f + ch) * plane..][..plane];
            acc += p.iter().sum::<f64>();
        }
        acc
    }))
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

/// out[n,o] = bias[o] + sum_i in[n,i] * w[o,i], weight layout [Out, In].
pub fn fc_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, d_in) = input.dims2()?;
    let (d_out, d_in2) = weight.dims2()?;
    if d_in != d_in2 {
        return Err(Error::shape("fc input features", d_in2, d_in));
    }
    let mut out = vec![0.0; n * d_out];
    let w = weight.data();
    let x = input.data();
    let b = bias.map(|b| b.data());
    par::for_each_chunk_mut(&mut out, d_out, |row, chunk| {
        let x_row = &x[row * d_in..][..d_in];
        for (o, slot) in chunk.iter_mut().enumerate() {
            let w_row = &w[o * d_in..][..d_in];
            let mut acc = match b {
                Some(b) => b[o],
                None => 0.0,
            };
            acc += x_row.iter().zip(w_row).map(|(a, b)| a * b).sum::<f64>();
            *slot = acc;
        }
    });
    Tensor::new(vec![n, d_out], out)
}

pub fn fc_input_grad(grad_out: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (n, d_out) = grad_out.dims2()?;
    let (d_out2, d_in) = weight.dims2()?;
    if d_out != d_out2 {
        return Err(Error::shape("fc grad features", d_out2, d_out));
    }
    let mut gin = vec![0.0; n * d_in];
    let w = weight.data();
    let g = grad_out.data();
    par::for_each_chunk_mut(&mut gin, d_in, |row, chunk| {
        for o in 0..d_out {
            let gv = g[row * d_out + o];
            for (d, wv) in chunk.iter_mut().zip(&w[o * d_in..][..d_in]) {
                *d += gv * wv;
            }
        }
    });
    Tensor::new(vec![n, d_in], gin)
}

pub fn fc_weight_grad(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (n, d_in) = input.dims2()?;
    let (n2, d_out) = grad_out.dims2()?;
    if n != n2 {
        return Err(Error::shape("fc weight grad batch", n, n2));
    }
    let mut gw = vec![0.0; d_out * d_in];
    let x = input.data();
    let g = grad_out.data();
    par::for_each_chunk_mut(&mut gw, d_in, |o, chunk| {
        for row in 0..n {
            let gv = g[row * d_out + o];
            for (d, xv) in chunk.iter_mut().zip(&x[row * d_in..][..d_in]) {
                *d += gv * xv;
            }
        }
    });
    Tensor::new(vec![d_out, d_in], gw)
}

pub fn fc_bias_grad(grad_out: &Tensor) -> Result<Vec<f64>> {
    let (n, d_out) = grad_out.dims2()?;
    let mut gb = vec![0.0; d_out];
    for row in 0..n {
        for (b, g) in gb.iter_mut().zip(&grad_out.data()[row * d_out..][..d_out]) {
            *b += g;
        }
    }
    Ok(gb)
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// Numerically stable sigmoid, saturating at the nearest representable
/// values inside (0,1) so the open-interval contract holds even for extreme
/// logits.
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub fn activation_forward(input: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => input.map(|x| if x > 0.0 { x } else { 0.0 }),
        Activation::LeakyRelu(alpha) => input.map(|x| if x > 0.0 { x } else { alpha * x }),
        Activation::Sigmoid => input.map(sigmoid),
    }
}

/// `pre` is the activation input, `out` its output (sigmoid uses the cached
/// output; the rectifiers use the input sign, with 0 on the negative side).
pub fn activation_backward(kind: Activation, grad_out: &Tensor, pre: &Tensor, out: &Tensor) -> Tensor {
    match kind {
        Activation::Relu => {
            let mut g = grad_out.clone();
            for (gv, &x) in g.data_mut().iter_mut().zip(pre.data()) {
                if x <= 0.0 {
                    *gv = 0.0;
                }
            }
            g
        }
        Activation::LeakyRelu(alpha) => {
            let mut g = grad_out.clone();
            for (gv, &x) in g.data_mut().iter_mut().zip(pre.data()) {
                if x <= 0.0 {
                    *gv *= alpha;
                }
            }
            g
        }
        Activation::Sigmoid => {
            let mut g = grad_out.clone();
            for (gv, &y) in g.data_mut().iter_mut().zip(out.data()) {
                *gv *= y * (1.0 - y);
            }
            g
        }
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

pub struct BnForward {
    pub output: Tensor,
    /// (x - mean) * inv_std, cached for the backward pass.
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    /// Biased (divide by m) per-channel variance.
    pub batch_var: Vec<f64>,
}

/// Train-mode batch normalization over (N,H,W) per channel.
pub fn bn_forward_train(
    input: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<BnForward> {
    let (n, c, h, w) = input.dims4()?;
    let plane = h * w;
    let m = n * plane;
    if m < 2 {
        return Err(Error::Config(format!(
            "batchnorm train mode needs N*H*W >= 2 per channel, got {m}"
        )));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape("batchnorm gamma/beta", c, gamma.len()));
    }
    let x = input.data();

    let stats: Vec<(f64, f64)> = par::map_indexed(c, |ch| {
        let mut sum = 0.0;
        for b in 0..n {
            let p = &x[(b * c + ch) * plane..][..plane];
            sum += p.iter().sum::<f64>();
        }
        let mean = sum / m as f64;
        let mut var = 0.0;
        for b in 0..n {
            let p = &x[(b * c + ch) * plane..][..plane];
            var += p.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>();
        }
        (mean, var / m as f64)
    });
    let batch_mean: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let batch_var: Vec<f64> = stats.iter().map(|s| s.1).collect();
    let inv_std: Vec<f64> = batch_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

    let mut normalized = vec![0.0; x.len()];
    par::for_each_chunk_mut(&mut normalized, plane, |idx, chunk| {
        let ch = idx % c;
        let (mean, istd) = (batch_mean[ch], inv_std[ch]);
        for (d, &v) in chunk.iter_mut().zip(&x[idx * plane..][..plane]) {
            *d = (v - mean) * istd;
        }
    });

    let mut output = vec![0.0; x.len()];
    par::for_each_chunk_mut(&mut output, plane, |idx, chunk| {
        let ch = idx % c;
        let (g, b) = (gamma[ch], beta[ch]);
        for (d, &v) in chunk.iter_mut().zip(&normalized[idx * plane..][..plane]) {
            *d = g * v + b;
        }
    });

    Ok(BnForward {
        output: Tensor::new(vec![n, c, h, w], output)?,
        normalized: Tensor::new(vec![n, c, h, w], normalized)?,
        inv_std,
        batch_mean,
        batch_var,
    })
}

/// Eval-mode batch normalization using running statistics.
pub fn bn_forward_eval(
    input: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    running_mean: &[f64],
    running_var: &[f64],
) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let plane = h * w;
    if gamma.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape("batchnorm eval stats", c, running_mean.len()));
    }
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    par::for_each_chunk_mut(&mut out, plane, |idx, chunk| {
        let ch = idx % c;
        let istd = 1.0 / (running_var[ch] + eps).sqrt();
        let (mean, g, b) = (running_mean[ch], gamma[ch], beta[ch]);
        for (d, &v) in chunk.iter_mut().zip(&x[idx * plane..][..plane]) {
            *d = g * (v - mean) * istd + b;
        }
    });
    Tensor::new(vec![n, c, h, w], out)
}

/// Train-mode backward with the full batch-statistics derivative:
/// dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)).
pub fn bn_backward_train(
    grad_out: &Tensor,
    normalized: &Tensor,
    inv_std: &[f64],
    gamma: &[f64],
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = grad_out.dims4()?;
    let plane = h * w;
    let m = (n * plane) as f64;
    let g = grad_out.data();
    let xh = normalized.data();

    // Per-channel sums: dbeta = sum g, dgamma = sum g*xhat.
    let sums: Vec<(f64, f64)> = par::map_indexed(c, |ch| {
        let mut s_g = 0.0;
        let mut s_gx = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            let gp = &g[base..][..plane];
            let xp = &xh[base..][..plane];
            for (gv, xv) in gp.iter().zip(xp) {
                s_g += gv;
                s_gx += gv * xv;
            }
        }
        (s_g, s_gx)
    });

    let mut gin = vec![0.0; g.len()];
    par::for_each_chunk_mut(&mut gin, plane, |idx, chunk| {
        let ch = idx % c;
        let (s_g, s_gx) = sums[ch];
        let ga = gamma[ch];
        let istd = inv_std[ch];
        let base = idx * plane;
        for (i, d) in chunk.iter_mut().enumerate() {
            let dxhat = g[base + i] * ga;
            *d = istd * (dxhat - ga * s_g / m - xh[base + i] * ga * s_gx / m);
        }
    });

    let dgamma: Vec<f64> = sums.iter().map(|s| s.1).collect();
    let dbeta: Vec<f64> = sums.iter().map(|s| s.0).collect();
    Ok((Tensor::new(vec![n, c, h, w], gin)?, dgamma, dbeta))
}

/// Eval-mode backward: frozen statistics, gradient passes through the affine
/// map only.
pub fn bn_backward_eval(
    grad_out: &Tensor,
    normalized_eval: &Tensor,
    gamma: &[f64],
    eps: f64,
    running_var: &[f64],
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = grad_out.dims4()?;
    let plane = h * w;
    let g = grad_out.data();
    let xh = normalized_eval.data();
    let sums: Vec<(f64, f64)> = par::map_indexed(c, |ch| {
        let mut s_g = 0.0;
        let mut s_gx = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            for (gv, xv) in g[base..][..plane].iter().zip(&xh[base..][..plane]) {
                s_g += gv;
                s_gx += gv * xv;
            }
        }
        (s_g, s_gx)
    });
    let mut gin = vec![0.0; g.len()];
    par::for_each_chunk_mut(&mut gin, plane, |idx, chunk| {
        let ch = idx % c;
        let scale = gamma[ch] / (running_var[ch] + eps).sqrt();
        for (d, &gv) in chunk.iter_mut().zip(&g[idx * plane..][..plane]) {
            *d = gv * scale;
        }
    });
    let dgamma: Vec<f64> = sums.iter().map(|s| s.1).collect();
    let dbeta: Vec<f64> = sums.iter().map(|s| s.0).collect();
    Ok((Tensor::new(vec![n, c, h, w], gin)?, dgamma, dbeta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use crate::tensor::sample_normal;

    fn t4(n: usize, c: usize, h: usize, w: usize, rng: &mut RngState) -> Tensor {
        sample_normal(rng, &[n, c, h, w])
    }

    #[test]
    fn conv_output_shapes_match_tables() {
        let mut rng = RngState::new(1);
        // 64 -> 32 with k=4, s=2, p=1
        let x = t4(1, 3, 64, 64, &mut rng);
        let w = t4(8, 3, 4, 4, &mut rng);
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 8, 32, 32]);
        // 32 -> 32 with k=3, s=1, p=1
        let x = t4(1, 8, 32, 32, &mut rng);
        let w = t4(8, 8, 3, 3, &mut rng);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 8, 32, 32]);
    }

    #[test]
    fn conv_scalar_case() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let b = Tensor::new(vec![1], vec![0.0]).unwrap();
        let y = conv2d(&x, &w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn conv_channel_mismatch_is_rejected() {
        let mut rng = RngState::new(2);
        let x = t4(1, 3, 8, 8, &mut rng);
        let w = t4(4, 2, 3, 3, &mut rng);
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
    }

    #[test]
    fn deconv_output_shapes_match_tables() {
        let mut rng = RngState::new(3);
        // 1 -> 4 with k=4, s=1, p=0
        let x = t4(1, 5, 1, 1, &mut rng);
        let w = t4(5, 7, 4, 4, &mut rng);
        let y = deconv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 7, 4, 4]);
        // 4 -> 8 with k=4, s=2, p=1
        let x = t4(1, 7, 4, 4, &mut rng);
        let w = t4(7, 3, 4, 4, &mut rng);
        let y = deconv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 8, 8]);
        // 32 -> 64 with k=4, s=2, p=1
        let x = t4(1, 2, 32, 32, &mut rng);
        let w = t4(2, 3, 4, 4, &mut rng);
        let y = deconv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 64, 64]);
    }

    #[test]
    fn conv_then_deconv_restores_spatial_size() {
        let mut rng = RngState::new(4);
        for &(k, s, p, h) in &[(4usize, 2usize, 1usize, 64usize), (3, 1, 1, 32), (4, 1, 0, 4), (4, 2, 1, 8)] {
            let x = t4(2, 3, h, h, &mut rng);
            let w = t4(5, 3, k, k, &mut rng);
            let y = conv2d(&x, &w, None, s, p).unwrap();
            let wd = t4(5, 3, k, k, &mut rng);
            let z = deconv2d(&y, &wd, None, s, p).unwrap();
            assert_eq!(z.shape()[2], h, "k={k} s={s} p={p}");
            assert_eq!(z.shape()[3], h);
        }
    }

    #[test]
    fn conv_deconv_adjointness() {
        let mut rng = RngState::new(5);
        for &(k, s, p, h) in &[(4usize, 2usize, 1usize, 8usize), (3, 1, 1, 7), (4, 1, 0, 6), (5, 3, 2, 9)] {
            let x = t4(2, 3, h, h, &mut rng);
            let w = t4(4, 3, k, k, &mut rng);
            let y = conv2d(&x, &w, None, s, p).unwrap();
            let ytest = sample_normal(&mut rng, y.shape());
            // <conv(x), y> == <x, deconv(y)> with shared weights, zero bias.
            let lhs = y.dot(&ytest);
            let back = deconv2d_forward_like_conv_grad(&ytest, &w, s, p, (h, h));
            let rhs = x.dot(&back);
            let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-30);
            assert!(rel < 1e-10, "k={k} s={s} p={p}: {lhs} vs {rhs}");
        }
    }

    // deconv2d forward must agree with conv2d input-grad whenever the conv
    // output size maps back exactly.
    fn deconv2d_forward_like_conv_grad(
        y: &Tensor,
        w: &Tensor,
        s: usize,
        p: usize,
        hw: (usize, usize),
    ) -> Tensor {
        let a = conv2d_input_grad(y, w, s, p, hw).unwrap();
        let b = deconv2d(y, w, None, s, p).unwrap();
        if b.shape() == a.shape() {
            assert_eq!(a, b, "deconv2d forward differs from conv2d input grad");
        }
        a
    }

    #[test]
    fn deconv_adjoint_to_its_own_input_grad() {
        let mut rng = RngState::new(6);
        let x = t4(2, 4, 5, 5, &mut rng);
        let w = t4(4, 3, 4, 4, &mut rng); // [Ci, Co, k, k]
        let y = deconv2d(&x, &w, None, 2, 1).unwrap();
        let yt = sample_normal(&mut rng, y.shape());
        let lhs = y.dot(&yt);
        let gx = deconv2d_input_grad(&yt, &w, 2, 1, (5, 5)).unwrap();
        let rhs = x.dot(&gx);
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-30);
        assert!(rel < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn weight_grads_match_finite_differences() {
        let mut rng = RngState::new(7);
        let x = t4(2, 3, 6, 6, &mut rng);
        let mut w = t4(4, 3, 3, 3, &mut rng);
        let gout = t4(2, 4, 6, 6, &mut rng);
        let gw = conv2d_weight_grad(&x, &gout, 1, 1, 3).unwrap();
        let h = 1e-6;
        for &i in &[0usize, 5, 17, 30, 100] {
            let orig = w.data()[i];
            w.data_mut()[i] = orig + h;
            let lp = conv2d(&x, &w, None, 1, 1).unwrap().dot(&gout);
            w.data_mut()[i] = orig - h;
            let lm = conv2d(&x, &w, None, 1, 1).unwrap().dot(&gout);
            w.data_mut()[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = gw.data()[i];
            assert!((num - ana).abs() / (num.abs() + ana.abs()).max(1e-8) < 1e-6);
        }
    }

    #[test]
    fn activations_match_hand_values() {
        let x = Tensor::new(vec![3], vec![-1.0, -5.0, 5.0]).unwrap();
        let leaky = activation_forward(&x, Activation::LeakyRelu(0.2));
        assert_eq!(leaky.data()[0], -0.2);
        let relu = activation_forward(&x, Activation::Relu);
        assert_eq!(relu.data(), &[0.0, 0.0, 5.0]);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn sigmoid_stays_inside_open_interval() {
        for &x in &[-1000.0, -50.0, 0.0, 50.0, 1000.0] {
            let y = sigmoid(x);
            assert!(y > 0.0 && y < 1.0, "sigmoid({x}) = {y}");
        }
    }

    #[test]
    fn bn_hand_case_two_values() {
        // Channel values [1, 3]: mean 2, biased var 1, eps 0 -> [-1, 1].
        let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let f = bn_forward_train(&x, &[1.0], &[0.0], 0.0).unwrap();
        assert!((f.output.data()[0] + 1.0).abs() < 1e-12);
        assert!((f.output.data()[1] - 1.0).abs() < 1e-12);
        assert_eq!(f.batch_mean[0], 2.0);
        assert_eq!(f.batch_var[0], 1.0);
    }

    #[test]
    fn bn_constant_channel_collapses_to_beta() {
        let x = Tensor::filled(&[4, 2, 3, 3], 7.5);
        let f = bn_forward_train(&x, &[1.0, 1.0], &[0.0, 0.25], 1e-5).unwrap();
        for (i, &v) in f.output.data().iter().enumerate() {
            let ch = (i / 9) % 2;
            let beta = if ch == 0 { 0.0 } else { 0.25 };
            assert!((v - beta).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn bn_train_output_is_normalized() {
        let mut rng = RngState::new(8);
        let x = t4(4, 3, 5, 5, &mut rng);
        let f = bn_forward_train(&x, &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        let m = (4 * 5 * 5) as f64;
        for ch in 0..3 {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for b in 0..4 {
                for &v in &f.output.data()[(b * 3 + ch) * 25..][..25] {
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / m;
            let var = sq / m - mean * mean;
            assert!(mean.abs() < 1e-8, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn bn_already_normalized_is_near_identity() {
        // Per-channel mean 0, var 1 inputs pass through up to the eps effect.
        let x = Tensor::new(vec![2, 1, 1, 1], vec![-1.0, 1.0]).unwrap();
        let f = bn_forward_train(&x, &[1.0], &[0.0], 1e-5).unwrap();
        for (a, b) in f.output.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn bn_train_needs_two_elements() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        assert!(bn_forward_train(&x, &[1.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn bn_backward_matches_finite_differences() {
        let mut rng = RngState::new(9);
        let x = t4(3, 2, 4, 4, &mut rng);
        let gamma = [1.3, 0.7];
        let beta = [0.1, -0.2];
        let gout = t4(3, 2, 4, 4, &mut rng);
        let f = bn_forward_train(&x, &gamma, &beta, 1e-5).unwrap();
        let (gin, dgamma, dbeta) = bn_backward_train(&gout, &f.normalized, &f.inv_std, &gamma).unwrap();

        let loss = |xt: &Tensor| -> f64 {
            bn_forward_train(xt, &gamma, &beta, 1e-5).unwrap().output.dot(&gout)
        };
        let h = 1e-6;
        let mut xp = x.clone();
        for &i in &[0usize, 7, 33, 90] {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + h;
            let lp = loss(&xp);
            xp.data_mut()[i] = orig - h;
            let lm = loss(&xp);
            xp.data_mut()[i] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = gin.data()[i];
            assert!((num - ana).abs() / (num.abs() + ana.abs()).max(1e-8) < 1e-5, "{num} vs {ana}");
        }

        // dgamma / dbeta by definition of the affine output.
        let mut dg_num = 0.0;
        let mut db_num = 0.0;
        for b in 0..3 {
            let base = (b * 2) * 16;
            for i in 0..16 {
                dg_num += gout.data()[base + i] * f.normalized.data()[base + i];
                db_num += gout.data()[base + i];
            }
        }
        assert!((dgamma[0] - dg_num).abs() < 1e-9);
        assert!((dbeta[0] - db_num).abs() < 1e-9);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn kernels_are_thread_count_invariant() {
        let mut rng = RngState::new(10);
        let x = t4(3, 4, 16, 16, &mut rng);
        let w = t4(6, 4, 4, 4, &mut rng);
        let b = sample_normal(&mut rng, &[6]);
        let default = conv2d(&x, &w, Some(&b), 2, 1).unwrap();
        let single = crate::par::with_threads(1, || conv2d(&x, &w, Some(&b), 2, 1).unwrap());
        let four = crate::par::with_threads(4, || conv2d(&x, &w, Some(&b), 2, 1).unwrap());
        assert_eq!(default, single);
        assert_eq!(default, four);
    }
}
