//! 2-D convolution: dense, grouped, and depthwise (groups = c_in).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor};

/// Convolution hyperparameters. Kernels are square; padding is symmetric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize, groups: usize) -> ConvSpec {
        ConvSpec { stride, pad, groups }
    }

    /// "Same" padding for stride-1, i.e. pad = floor(k/2).
    pub fn same(k: usize, stride: usize) -> ConvSpec {
        ConvSpec { stride, pad: k / 2, groups: 1 }
    }
}

/// Output extent along one axis: floor((in + 2*pad - k) / stride) + 1.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::config(format!(
            "window {k} larger than padded input {padded} (input {input}, pad {pad})"
        )));
    }
    if stride == 0 {
        return Err(Error::config("stride must be >= 1"));
    }
    Ok((padded - k) / stride + 1)
}

fn check_conv_args<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    spec: &ConvSpec,
) -> Result<(Shape4, usize)> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.h != ws.w {
        return Err(Error::config(format!("conv kernels must be square, got {}x{}", ws.h, ws.w)));
    }
    if spec.groups == 0 || xs.c % spec.groups != 0 {
        return Err(Error::config(format!(
            "groups {} does not divide input channels {}",
            spec.groups, xs.c
        )));
    }
    if ws.n % spec.groups != 0 {
        return Err(Error::config(format!(
            "groups {} does not divide output channels {}",
            spec.groups, ws.n
        )));
    }
    if ws.c != xs.c / spec.groups {
        return Err(Error::config(format!(
            "kernel expects {} input channels per group, input has {} ({} groups)",
            ws.c,
            xs.c / spec.groups,
            spec.groups
        )));
    }
    if let Some(b) = bias {
        if b.numel() != ws.n {
            return Err(Error::config(format!(
                "bias has {} elements, expected one per output channel ({})",
                b.numel(),
                ws.n
            )));
        }
    }
    let oh = conv_out_dim(xs.h, ws.h, spec.stride, spec.pad)?;
    let ow = conv_out_dim(xs.w, ws.w, spec.stride, spec.pad)?;
    Ok((Shape4::new(xs.n, ws.n, oh, ow), ws.h))
}

/// Cross-correlation of `x` (n, c_in, h, w) with kernels `w`
/// (c_out, c_in/groups, k, k), plus optional per-channel bias.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    spec: &ConvSpec,
) -> Result<Tensor<S>> {
    let (out_shape, k) = check_conv_args(x, w, bias, spec)?;
    let xs = x.shape();
    let cpg_in = xs.c / spec.groups;
    let cpg_out = out_shape.c / spec.groups;
    let (oh, ow) = (out_shape.h, out_shape.w);

    let mut out = Tensor::zeros(out_shape);
    let plane = oh * ow;
    // Each (n, c_out) output plane is independent; deterministic for any
    // worker count since every element keeps its own accumulation order.
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(pi, out_plane)| {
            let n = pi / out_shape.c;
            let co = pi % out_shape.c;
            let g = co / cpg_out;
            let b = bias.map(|b| b.data()[co].as_f64()).unwrap_or(0.0);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b;
                    for cig in 0..cpg_in {
                        let ci = g * cpg_in + cig;
                        let x_plane = x.plane(n, ci);
                        let w_chan = &w.data()[(co * cpg_in + cig) * k * k..][..k * k];
                        for ky in 0..k {
                            let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            let x_row = &x_plane[iy as usize * xs.w..][..xs.w];
                            let w_row = &w_chan[ky * k..][..k];
                            for kx in 0..k {
                                let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                if ix < 0 || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += x_row[ix as usize].as_f64() * w_row[kx].as_f64();
                            }
                        }
                    }
                    out_plane[oy * ow + ox] = S::from_f64(acc);
                }
            }
        });
    Ok(out)
}

/// Gradients of `conv2d` w.r.t. input, kernel, and bias given upstream `dy`.
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    spec: &ConvSpec,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (out_shape, k) = check_conv_args(x, w, None, spec)?;
    if dy.shape() != out_shape {
        return Err(Error::config(format!(
            "conv backward: dy shape {} does not match forward output {}",
            dy.shape(),
            out_shape
        )));
    }
    let xs = x.shape();
    let cpg_in = xs.c / spec.groups;
    let cpg_out = out_shape.c / spec.groups;

    let mut dx_acc = vec![0.0f64; xs.numel()];
    let mut dw_acc = vec![0.0f64; w.numel()];
    let mut db_acc = vec![0.0f64; out_shape.c];

    for n in 0..xs.n {
        for co in 0..out_shape.c {
            let g = co / cpg_out;
            let dy_plane = dy.plane(n, co);
            for oy in 0..out_shape.h {
                for ox in 0..out_shape.w {
                    let gval = dy_plane[oy * out_shape.w + ox].as_f64();
                    if gval == 0.0 {
                        continue;
                    }
                    db_acc[co] += gval;
                    for cig in 0..cpg_in {
                        let ci = g * cpg_in + cig;
                        let x_plane = x.plane(n, ci);
                        let w_base = (co * cpg_in + cig) * k * k;
                        let dx_base = (n * xs.c + ci) * xs.h * xs.w;
                        for ky in 0..k {
                            let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                if ix < 0 || ix >= xs.w as isize {
                                    continue;
                                }
                                let xi = iy as usize * xs.w + ix as usize;
                                dx_acc[dx_base + xi] +=
                                    gval * w.data()[w_base + ky * k + kx].as_f64();
                                dw_acc[w_base + ky * k + kx] +=
                                    gval * x_plane[xi].as_f64();
                            }
                        }
                    }
                }
            }
        }
    }

    let dx = Tensor::from_vec(xs, dx_acc.into_iter().map(S::from_f64).collect())?;
    let dw = Tensor::from_vec(w.shape(), dw_acc.into_iter().map(S::from_f64).collect())?;
    let db = Tensor::from_channels(&db_acc.into_iter().map(S::from_f64).collect::<Vec<_>>());
    Ok((dx, dw, db))
}
