//! Forward and backward kernels for the restricted operator set.
//!
//! Every function here is pure: it reads its inputs and returns new tensors.
//! The tape in [`crate::tape`] records calls and routes gradients through the
//! matching `*_backward` function.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Resolved geometry of a (grouped) 2D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn resolve(
        x: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        let [n, cin, h, w] = x.dims4("conv input")?;
        let [cout, cin_g, kh, kw] = weight.dims4("conv weight")?;
        if stride == 0 {
            return Err(invalid!("conv stride must be positive"));
        }
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(shape_err!(
                "groups={groups} must divide input channels ({cin}) and output channels ({cout})"
            ));
        }
        if cin_g != cin / groups {
            return Err(shape_err!(
                "weight input-channel dimension is {cin_g}, expected {} (input channels {cin} / groups {groups})",
                cin / groups
            ));
        }
        if kh != kw {
            return Err(shape_err!("kernel must be square, got {kh}x{kw}"));
        }
        if kh % 2 == 0 {
            return Err(shape_err!("kernel size must be odd, got {kh}"));
        }
        if bias.shape() != [cout] {
            return Err(shape_err!(
                "bias shape {:?} does not match output channels {cout}",
                bias.shape()
            ));
        }
        let k = kh;
        let oh = out_extent(h, k, stride, pad, "height")?;
        let ow = out_extent(w, k, stride, pad, "width")?;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            groups,
            oh,
            ow,
        })
    }

    fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    /// Output columns `ox` for which `ox * stride + kx - pad` lands inside the row.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        valid_range(kx, self.pad, self.stride, self.w, self.ow)
    }
}

fn out_extent(size: usize, k: usize, stride: usize, pad: usize, axis: &str) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        return Err(shape_err!(
            "input {axis} {size} with padding {pad} is smaller than kernel {k}"
        ));
    }
    Ok((padded - k) / stride + 1)
}

fn valid_range(kx: usize, pad: usize, stride: usize, size: usize, out: usize) -> (usize, usize) {
    // ix = ox*stride + kx - pad must satisfy 0 <= ix < size.
    let lo = if pad > kx {
        (pad - kx).div_ceil(stride)
    } else {
        0
    };
    let hi = if size + pad > kx {
        ((size - 1 + pad - kx) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Grouped cross-correlation (no kernel flip). `groups == 1` is ordinary
/// convolution; `groups == cin == cout` is depthwise.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor> {
    let g = ConvGeom::resolve(x, weight, bias, stride, pad, groups)?;
    let mut out = vec![0.0f32; g.n * g.cout * g.oh * g.ow];
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let cin_g = g.cin_per_group();
    let cout_g = g.cout_per_group();
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let out_plane = &mut out[(n * g.cout + oc) * plane_out..][..plane_out];
            out_plane.fill(bd[oc]);
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let in_plane = &xd[(n * g.cin + ic) * plane_in..][..plane_in];
                let wbase = (oc * cin_g + icg) * g.k * g.k;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = wd[wbase + ky * g.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (c0, c1) = g.valid_cols(kx);
                        for oy in 0..g.oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let row_in = &in_plane[iy as usize * g.w..][..g.w];
                            let row_out = &mut out_plane[oy * g.ow..][..g.ow];
                            if g.stride == 1 {
                                let shift = kx as isize - g.pad as isize;
                                for ox in c0..c1 {
                                    row_out[ox] += wv * row_in[(ox as isize + shift) as usize];
                                }
                            } else {
                                for ox in c0..c1 {
                                    row_out[ox] += wv * row_in[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.n, g.cout, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let cout = weight.shape()[0];
    let bias = Tensor::zeros(&[cout]);
    let g = ConvGeom::resolve(x, weight, &bias, stride, pad, groups)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(shape_err!(
            "conv output gradient {:?} does not match output {:?}",
            grad_out.shape(),
            [g.n, g.cout, g.oh, g.ow]
        ));
    }
    let mut gx = vec![0.0f32; x.numel()];
    let mut gw = vec![0.0f32; weight.numel()];
    let mut gb = vec![0.0f32; g.cout];
    let (xd, wd, gyd) = (x.data(), weight.data(), grad_out.data());
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let cin_g = g.cin_per_group();
    let cout_g = g.cout_per_group();
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let gy_plane = &gyd[(n * g.cout + oc) * plane_out..][..plane_out];
            gb[oc] += gy_plane.iter().sum::<f32>();
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let in_off = (n * g.cin + ic) * plane_in;
                let wbase = (oc * cin_g + icg) * g.k * g.k;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = wd[wbase + ky * g.k + kx];
                        let (c0, c1) = g.valid_cols(kx);
                        let mut acc = 0.0f32;
                        for oy in 0..g.oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let row_off = in_off + iy as usize * g.w;
                            let gy_row = &gy_plane[oy * g.ow..][..g.ow];
                            for ox in c0..c1 {
                                let ix = ox * g.stride + kx - g.pad;
                                let gy = gy_row[ox];
                                acc += gy * xd[row_off + ix];
                                gx[row_off + ix] += wv * gy;
                            }
                        }
                        gw[wbase + ky * g.k + kx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), gx)?,
        Tensor::new(weight.shape(), gw)?,
        Tensor::new(&[g.cout], gb)?,
    ))
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Saved state of a batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
    pub train: bool,
}

/// Per-channel batch statistics produced in train mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Tensor,
    /// Unbiased variance (the value folded into running statistics).
    pub var: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

fn check_affine(c: usize, gamma: &Tensor, beta: &Tensor, what: &str) -> Result<()> {
    if gamma.shape() != [c] {
        return Err(shape_err!(
            "{what} gamma shape {:?} does not match channel count {c}",
            gamma.shape()
        ));
    }
    if beta.shape() != [c] {
        return Err(shape_err!(
            "{what} beta shape {:?} does not match channel count {c}",
            beta.shape()
        ));
    }
    Ok(())
}

/// Batch normalization over `(N, H, W)` per channel.
///
/// Train mode normalizes with biased batch variance and returns batch statistics
/// for the caller to fold into running estimates; eval mode uses the running
/// estimates only.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f32,
    mode: NormMode,
) -> Result<(Tensor, BatchNormCache, Option<BatchStats>)> {
    if eps <= 0.0 {
        return Err(invalid!("batchnorm eps must be positive, got {eps}"));
    }
    let [n, c, h, w] = x.dims4("batchnorm input")?;
    check_affine(c, gamma, beta, "batchnorm")?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(shape_err!(
            "batchnorm running statistics must have shape [{c}], got {:?} and {:?}",
            running_mean.shape(),
            running_var.shape()
        ));
    }
    let hw = h * w;
    let count = n * hw;
    let xd = x.data();
    let mut out = vec![0.0f32; x.numel()];
    let mut xhat = vec![0.0f32; x.numel()];
    let mut inv_std = vec![0.0f32; c];
    let mut stats = None;
    let (mean, var_biased): (Vec<f32>, Vec<f32>) = match mode {
        NormMode::Train => {
            let mut mean = vec![0.0f32; c];
            let mut var = vec![0.0f32; c];
            for ch in 0..c {
                let mut s = 0.0f64;
                for b in 0..n {
                    s += xd[(b * c + ch) * hw..][..hw]
                        .iter()
                        .map(|&v| v as f64)
                        .sum::<f64>();
                }
                let m = s / count as f64;
                let mut sq = 0.0f64;
                for b in 0..n {
                    sq += xd[(b * c + ch) * hw..][..hw]
                        .iter()
                        .map(|&v| (v as f64 - m).powi(2))
                        .sum::<f64>();
                }
                mean[ch] = m as f32;
                var[ch] = (sq / count as f64) as f32;
            }
            let unbiased: Vec<f32> = if count > 1 {
                var.iter()
                    .map(|&v| v * count as f32 / (count - 1) as f32)
                    .collect()
            } else {
                var.clone()
            };
            stats = Some(BatchStats {
                mean: Tensor::new(&[c], mean.clone())?,
                var: Tensor::new(&[c], unbiased)?,
            });
            (mean, var)
        }
        NormMode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec()),
    };
    let (gd, bd) = (gamma.data(), beta.data());
    for ch in 0..c {
        let inv = 1.0 / (var_biased[ch] + eps).sqrt();
        inv_std[ch] = inv;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let xn = (xd[i] - mean[ch]) * inv;
                xhat[i] = xn;
                out[i] = gd[ch] * xn + bd[ch];
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), out)?,
        BatchNormCache {
            xhat,
            inv_std,
            train: mode == NormMode::Train,
        },
        stats,
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batchnorm2d_backward(
    grad_out: &Tensor,
    gamma: &Tensor,
    cache: &BatchNormCache,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, c, h, w] = grad_out.dims4("batchnorm gradient")?;
    let hw = h * w;
    let count = (n * hw) as f32;
    let gy = grad_out.data();
    let gd = gamma.data();
    let mut gx = vec![0.0f32; grad_out.numel()];
    let mut ggamma = vec![0.0f32; c];
    let mut gbeta = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum_gy = 0.0f64;
        let mut sum_gy_xhat = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                sum_gy += gy[i] as f64;
                sum_gy_xhat += (gy[i] * cache.xhat[i]) as f64;
            }
        }
        gbeta[ch] = sum_gy as f32;
        ggamma[ch] = sum_gy_xhat as f32;
        let scale = gd[ch] * cache.inv_std[ch];
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                gx[i] = if cache.train {
                    scale
                        * (gy[i]
                            - sum_gy as f32 / count
                            - cache.xhat[i] * sum_gy_xhat as f32 / count)
                } else {
                    scale * gy[i]
                };
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape(), gx)?,
        Tensor::new(&[c], ggamma)?,
        Tensor::new(&[c], gbeta)?,
    ))
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Vec<f32>,
    /// One entry per (batch, location).
    pub inv_std: Vec<f32>,
}

/// Layer normalization over the channel axis at every spatial location.
pub fn layernorm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<(Tensor, LayerNormCache)> {
    if eps <= 0.0 {
        return Err(invalid!("layernorm eps must be positive, got {eps}"));
    }
    let [n, c, h, w] = x.dims4("layernorm input")?;
    check_affine(c, gamma, beta, "layernorm")?;
    let hw = h * w;
    let xd = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut out = vec![0.0f32; x.numel()];
    let mut xhat = vec![0.0f32; x.numel()];
    let mut inv_std = vec![0.0f32; n * hw];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut s = 0.0f64;
            for ch in 0..c {
                s += xd[base + ch * hw + p] as f64;
            }
            let mean = s / c as f64;
            let mut sq = 0.0f64;
            for ch in 0..c {
                sq += (xd[base + ch * hw + p] as f64 - mean).powi(2);
            }
            let inv = 1.0 / ((sq / c as f64) as f32 + eps).sqrt();
            inv_std[b * hw + p] = inv;
            for ch in 0..c {
                let i = base + ch * hw + p;
                let xn = (xd[i] - mean as f32) * inv;
                xhat[i] = xn;
                out[i] = gd[ch] * xn + bd[ch];
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), out)?,
        LayerNormCache { xhat, inv_std },
    ))
}

pub fn layernorm_backward(
    grad_out: &Tensor,
    gamma: &Tensor,
    cache: &LayerNormCache,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, c, h, w] = grad_out.dims4("layernorm gradient")?;
    let hw = h * w;
    let gy = grad_out.data();
    let gd = gamma.data();
    let mut gx = vec![0.0f32; grad_out.numel()];
    let mut ggamma = vec![0.0f64; c];
    let mut gbeta = vec![0.0f64; c];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut sum_g = 0.0f32;
            let mut sum_g_xhat = 0.0f32;
            for ch in 0..c {
                let i = base + ch * hw + p;
                let g = gy[i] * gd[ch];
                sum_g += g;
                sum_g_xhat += g * cache.xhat[i];
                ggamma[ch] += (gy[i] * cache.xhat[i]) as f64;
                gbeta[ch] += gy[i] as f64;
            }
            let inv = cache.inv_std[b * hw + p];
            let cf = c as f32;
            for ch in 0..c {
                let i = base + ch * hw + p;
                let g = gy[i] * gd[ch];
                gx[i] = inv * (g - sum_g / cf - cache.xhat[i] * sum_g_xhat / cf);
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape(), gx)?,
        Tensor::new(&[c], ggamma.iter().map(|&v| v as f32).collect())?,
        Tensor::new(&[c], gbeta.iter().map(|&v| v as f32).collect())?,
    ))
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

/// Subgradient 0 at exactly 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    zip_map(x, grad_out, |v, g| if v > 0.0 { g } else { 0.0 })
}

pub fn sigmoid_scalar(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    map(x, sigmoid_scalar)
}

/// Takes the forward *output*.
pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    zip_map(y, grad_out, |s, g| g * s * (1.0 - s))
}

/// `(outer, channels, inner)` decomposition for channel-axis reductions.
fn channel_layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape()[..] {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(shape_err!(
            "softmax expects rank 2 [N,C] or rank 4 [N,C,H,W], got {:?}",
            x.shape()
        )),
    }
}

/// Softmax along axis 1 (the channel axis).
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let (outer, c, inner) = channel_layout(x)?;
    let xd = x.data();
    let mut out = vec![0.0f32; x.numel()];
    for o in 0..outer {
        for p in 0..inner {
            let idx = |ch: usize| (o * c + ch) * inner + p;
            let max = (0..c)
                .map(|ch| xd[idx(ch)])
                .fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for ch in 0..c {
                let e = (xd[idx(ch)] - max).exp();
                out[idx(ch)] = e;
                sum += e as f64;
            }
            let inv = (1.0 / sum) as f32;
            for ch in 0..c {
                out[idx(ch)] *= inv;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Takes the forward *output*.
pub fn softmax_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (outer, c, inner) = channel_layout(y)?;
    let (yd, gd) = (y.data(), grad_out.data());
    let mut gx = vec![0.0f32; y.numel()];
    for o in 0..outer {
        for p in 0..inner {
            let idx = |ch: usize| (o * c + ch) * inner + p;
            let dot: f32 = (0..c).map(|ch| yd[idx(ch)] * gd[idx(ch)]).sum();
            for ch in 0..c {
                gx[idx(ch)] = yd[idx(ch)] * (gd[idx(ch)] - dot);
            }
        }
    }
    Tensor::new(y.shape(), gx)
}

// ---------------------------------------------------------------------------
// Dense and layout operators
// ---------------------------------------------------------------------------

/// `y = x Wᵀ + b` with `x: [N, Din]`, `W: [Dout, Din]`, `b: [Dout]`.
pub fn dense(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [n, din] = x.dims2("dense input")?;
    let [dout, wdin] = weight.dims2("dense weight")?;
    if wdin != din {
        return Err(shape_err!(
            "dense weight input dimension {wdin} does not match input features {din}"
        ));
    }
    if bias.shape() != [dout] {
        return Err(shape_err!(
            "dense bias shape {:?} does not match output features {dout}",
            bias.shape()
        ));
    }
    let (xd, wd, bd) = (x.data(), weight.data(), bias.data());
    let mut out = vec![0.0f32; n * dout];
    for r in 0..n {
        let xr = &xd[r * din..][..din];
        for o in 0..dout {
            let wr = &wd[o * din..][..din];
            out[r * dout + o] = bd[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f32>();
        }
    }
    Tensor::new(&[n, dout], out)
}

pub fn dense_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, din] = x.dims2("dense input")?;
    let [dout, _] = weight.dims2("dense weight")?;
    let (xd, wd, gd) = (x.data(), weight.data(), grad_out.data());
    let mut gx = vec![0.0f32; n * din];
    let mut gw = vec![0.0f32; dout * din];
    let mut gb = vec![0.0f32; dout];
    for r in 0..n {
        for o in 0..dout {
            let g = gd[r * dout + o];
            gb[o] += g;
            for i in 0..din {
                gx[r * din + i] += g * wd[o * din + i];
                gw[o * din + i] += g * xd[r * din + i];
            }
        }
    }
    Ok((
        Tensor::new(&[n, din], gx)?,
        Tensor::new(&[dout, din], gw)?,
        Tensor::new(&[dout], gb)?,
    ))
}

/// `[N, ...] -> [N, rest]`.
pub fn flatten(x: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    x.reshape(&[n, x.numel() / n])
}

/// Average over disjoint windows; output extents must divide input extents.
pub fn adaptive_avg_pool2d(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("pool input")?;
    let (fh, fw) = pool_factors(h, w, out_h, out_w)?;
    let xd = x.data();
    let mut out = vec![0.0f32; n * c * out_h * out_w];
    let norm = 1.0 / (fh * fw) as f32;
    for plane in 0..n * c {
        let ip = &xd[plane * h * w..][..h * w];
        let op = &mut out[plane * out_h * out_w..][..out_h * out_w];
        for y in 0..h {
            for x_ in 0..w {
                op[(y / fh) * out_w + x_ / fw] += ip[y * w + x_];
            }
        }
        op.iter_mut().for_each(|v| *v *= norm);
    }
    Tensor::new(&[n, c, out_h, out_w], out)
}

fn pool_factors(h: usize, w: usize, out_h: usize, out_w: usize) -> Result<(usize, usize)> {
    if out_h == 0 || out_w == 0 || !h.is_multiple_of(out_h) || !w.is_multiple_of(out_w) {
        return Err(shape_err!(
            "pool output {out_h}x{out_w} must evenly divide input {h}x{w}"
        ));
    }
    Ok((h / out_h, w / out_w))
}

pub fn adaptive_avg_pool2d_backward(x_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = [x_shape[0], x_shape[1], x_shape[2], x_shape[3]];
    let [_, _, out_h, out_w] = grad_out.dims4("pool gradient")?;
    let (fh, fw) = pool_factors(h, w, out_h, out_w)?;
    let norm = 1.0 / (fh * fw) as f32;
    let gd = grad_out.data();
    let mut gx = vec![0.0f32; n * c * h * w];
    for plane in 0..n * c {
        let gp = &gd[plane * out_h * out_w..][..out_h * out_w];
        for y in 0..h {
            for x_ in 0..w {
                gx[plane * h * w + y * w + x_] = gp[(y / fh) * out_w + x_ / fw] * norm;
            }
        }
    }
    Tensor::new(x_shape, gx)
}

/// Nearest-neighbour upsampling by integer factors.
pub fn upsample_nearest(x: &Tensor, fh: usize, fw: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("upsample input")?;
    if fh == 0 || fw == 0 {
        return Err(invalid!("upsample factors must be positive"));
    }
    let (oh, ow) = (h * fh, w * fw);
    let xd = x.data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    for plane in 0..n * c {
        for y in 0..oh {
            for x_ in 0..ow {
                out[plane * oh * ow + y * ow + x_] = xd[plane * h * w + (y / fh) * w + x_ / fw];
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn upsample_nearest_backward(x_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = [x_shape[0], x_shape[1], x_shape[2], x_shape[3]];
    let [_, _, oh, ow] = grad_out.dims4("upsample gradient")?;
    let (fh, fw) = (oh / h, ow / w);
    let gd = grad_out.data();
    let mut gx = vec![0.0f32; n * c * h * w];
    for plane in 0..n * c {
        for y in 0..oh {
            for x_ in 0..ow {
                gx[plane * h * w + (y / fh) * w + x_ / fw] += gd[plane * oh * ow + y * ow + x_];
            }
        }
    }
    Tensor::new(x_shape, gx)
}

/// Stack along axis 1. All inputs must share every other extent.
pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    concat_axis(xs, 1)
}

/// Stack along axis 0.
pub fn concat_batch(xs: &[&Tensor]) -> Result<Tensor> {
    concat_axis(xs, 0)
}

fn concat_axis(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| invalid!("concatenation of an empty list"))?;
    let shape = first.shape();
    if axis >= shape.len() {
        return Err(shape_err!(
            "concat axis {axis} out of range for {:?}",
            shape
        ));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut total = 0;
    for (i, t) in xs.iter().enumerate() {
        let s = t.shape();
        if s.len() != shape.len()
            || s[..axis] != shape[..axis]
            || s[axis + 1..] != shape[axis + 1..]
        {
            return Err(shape_err!(
                "concat input {i} has shape {:?}, incompatible with {:?} along axis {axis}",
                s,
                shape
            ));
        }
        total += s[axis];
    }
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in xs {
            let len = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * len..][..len]);
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = total;
    Tensor::new(&out_shape, out)
}

/// Contiguous slice `[start, start + len)` along `axis`.
pub fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() || len == 0 || start + len > shape[axis] {
        return Err(shape_err!(
            "narrow [{start}, {}) out of range on axis {axis} of {:?}",
            start + len,
            shape
        ));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * shape[axis] + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    Tensor::new(&out_shape, out)
}

/// Scatter a gradient of a [`narrow`] back into a zero tensor of the input shape.
pub fn narrow_backward(
    x_shape: &[usize],
    axis: usize,
    start: usize,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let len = grad_out.shape()[axis];
    let outer: usize = x_shape[..axis].iter().product();
    let inner: usize = x_shape[axis + 1..].iter().product();
    let mut gx = vec![0.0f32; x_shape.iter().product()];
    for o in 0..outer {
        let base = (o * x_shape[axis] + start) * inner;
        gx[base..base + len * inner]
            .copy_from_slice(&grad_out.data()[o * len * inner..][..len * inner]);
    }
    Tensor::new(x_shape, gx)
}

/// `[N, C, H, W] -> [N·H·W, C]`: one row per spatial location (token).
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("token input")?;
    let hw = h * w;
    let xd = x.data();
    let mut out = vec![0.0f32; x.numel()];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                out[(b * hw + p) * c + ch] = xd[(b * c + ch) * hw + p];
            }
        }
    }
    Tensor::new(&[n * hw, c], out)
}

pub fn to_tokens_backward(x_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = [x_shape[0], x_shape[1], x_shape[2], x_shape[3]];
    let hw = h * w;
    let gd = grad_out.data();
    let mut gx = vec![0.0f32; n * c * hw];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..hw {
                gx[(b * c + ch) * hw + p] = gd[(b * hw + p) * c + ch];
            }
        }
    }
    Tensor::new(x_shape, gx)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "add operands differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(zip_map(a, b, |x, y| x + y))
}

/// Repeat a batch-1 tensor `n` times along axis 0.
pub fn expand_batch(x: &Tensor, n: usize) -> Result<Tensor> {
    if x.shape()[0] != 1 || n == 0 {
        return Err(shape_err!(
            "expand_batch needs a batch-1 tensor and n > 0, got {:?} and n={n}",
            x.shape()
        ));
    }
    let mut shape = x.shape().to_vec();
    shape[0] = n;
    let data = x.data().repeat(n);
    Tensor::new(&shape, data)
}

pub fn expand_batch_backward(grad_out: &Tensor) -> Result<Tensor> {
    let n = grad_out.shape()[0];
    let per = grad_out.numel() / n;
    let mut g = vec![0.0f32; per];
    for b in 0..n {
        for (acc, v) in g.iter_mut().zip(&grad_out.data()[b * per..][..per]) {
            *acc += v;
        }
    }
    let mut shape = grad_out.shape().to_vec();
    shape[0] = 1;
    Tensor::new(&shape, g)
}

/// Multiply column `j` of a `[N, K]` matrix by `factors[j]`.
pub fn scale_columns(x: &Tensor, factors: &[f32]) -> Result<Tensor> {
    let [n, k] = x.dims2("scale_columns input")?;
    if factors.len() != k {
        return Err(shape_err!(
            "scale_columns got {} factors for {k} columns",
            factors.len()
        ));
    }
    let mut out = x.data().to_vec();
    for r in 0..n {
        for j in 0..k {
            out[r * k + j] *= factors[j];
        }
    }
    Tensor::new(&[n, k], out)
}

pub fn map(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

pub fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "zip_map on different shapes");
    Tensor::new(
        a.shape(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
    .expect("same shape")
}
