//! Bilinear resampling with the half-pixel coordinate convention.
//!
//! Source coordinate for output index `i`: `(i + 0.5) * in/out - 0.5`,
//! clamped to the valid range. Tap weights are computed in f64.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor};

/// One axis of bilinear taps: (low index, high index, weight on low tap).
type Taps = Vec<(usize, usize, f64)>;

fn axis_taps(in_len: usize, out_len: usize) -> Taps {
    let ratio = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac)
        })
        .collect()
}

fn check_scale(scale: usize) -> Result<()> {
    if !(2..=64).contains(&scale) || !scale.is_power_of_two() {
        return Err(Error::config(format!(
            "upsample scale must be a power of two in [2, 64], got {scale}"
        )));
    }
    Ok(())
}

fn sample<S: Scalar>(x: &Tensor<S>, out_h: usize, out_w: usize) -> Tensor<S> {
    let shape = x.shape();
    let row_taps = axis_taps(shape.h, out_h);
    let col_taps = axis_taps(shape.w, out_w);
    let mut out = Tensor::zeros(Shape4::new(shape.n, shape.c, out_h, out_w));
    for n in 0..shape.n {
        for c in 0..shape.c {
            let plane = x.plane(n, c);
            let out_plane = out.plane_mut(n, c);
            for (oy, &(y0, y1, wy)) in row_taps.iter().enumerate() {
                let row0 = &plane[y0 * shape.w..(y0 + 1) * shape.w];
                let row1 = &plane[y1 * shape.w..(y1 + 1) * shape.w];
                let out_row = &mut out_plane[oy * out_w..(oy + 1) * out_w];
                for (ox, &(x0, x1, wx)) in col_taps.iter().enumerate() {
                    let top = row0[x0].as_f64() * wx + row0[x1].as_f64() * (1.0 - wx);
                    let bot = row1[x0].as_f64() * wx + row1[x1].as_f64() * (1.0 - wx);
                    out_row[ox] = S::from_f64(top * wy + bot * (1.0 - wy));
                }
            }
        }
    }
    out
}

/// Resamples to an arbitrary target size (used for input preprocessing).
pub fn resize_bilinear<S: Scalar>(x: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("resize target must be positive"));
    }
    Ok(sample(x, out_h, out_w))
}

/// Upsamples by an integer power-of-two factor in [2, 64].
pub fn upsample_bilinear<S: Scalar>(x: &Tensor<S>, scale: usize) -> Result<Tensor<S>> {
    check_scale(scale)?;
    let shape = x.shape();
    Ok(sample(x, shape.h * scale, shape.w * scale))
}

/// Transpose of [`upsample_bilinear`]: scatters each output gradient onto
/// its source taps with the same weights.
pub fn upsample_bilinear_backward<S: Scalar>(
    in_shape: Shape4,
    scale: usize,
    dy: &Tensor<S>,
) -> Result<Tensor<S>> {
    check_scale(scale)?;
    let out_h = in_shape.h * scale;
    let out_w = in_shape.w * scale;
    debug_assert_eq!(dy.shape(), Shape4::new(in_shape.n, in_shape.c, out_h, out_w));
    let row_taps = axis_taps(in_shape.h, out_h);
    let col_taps = axis_taps(in_shape.w, out_w);
    let mut dx = vec![0.0f64; in_shape.numel()];
    let plane_len = in_shape.h * in_shape.w;
    for n in 0..in_shape.n {
        for c in 0..in_shape.c {
            let base = (n * in_shape.c + c) * plane_len;
            let dy_plane = dy.plane(n, c);
            for (oy, &(y0, y1, wy)) in row_taps.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in col_taps.iter().enumerate() {
                    let g = dy_plane[oy * out_w + ox].as_f64();
                    dx[base + y0 * in_shape.w + x0] += g * wy * wx;
                    dx[base + y0 * in_shape.w + x1] += g * wy * (1.0 - wx);
                    dx[base + y1 * in_shape.w + x0] += g * (1.0 - wy) * wx;
                    dx[base + y1 * in_shape.w + x1] += g * (1.0 - wy) * (1.0 - wx);
                }
            }
        }
    }
    Tensor::from_vec(in_shape, dx.into_iter().map(S::from_f64).collect())
}
