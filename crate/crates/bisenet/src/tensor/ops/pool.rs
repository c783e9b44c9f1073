//! Max, average, and global-average pooling.
//!
//! Average pooling divides by the number of *valid* (non-padding) elements
//! in each window. Max-pool ties resolve to the first element in row-major
//! scan order, and the backward pass routes gradient to that element only.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor};

use super::conv::conv_out_dim;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolSpec {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self { kernel, stride, pad }
    }
}

fn check_pool(shape: Shape4, spec: PoolSpec) -> Result<Shape4> {
    if spec.kernel == 0 || spec.stride == 0 {
        return Err(Error::config("pool kernel and stride must be positive"));
    }
    if spec.pad >= spec.kernel {
        return Err(Error::config(format!(
            "pool padding {} must be smaller than kernel {}",
            spec.pad, spec.kernel
        )));
    }
    let oh = conv_out_dim(shape.h, spec.kernel, spec.stride, spec.pad)?;
    let ow = conv_out_dim(shape.w, spec.kernel, spec.stride, spec.pad)?;
    Ok(Shape4::new(shape.n, shape.c, oh, ow))
}

/// Iterates the valid (unpadded) extent of one pooling window.
fn window(out_idx: usize, stride: usize, pad: usize, kernel: usize, limit: usize) -> (usize, usize) {
    let start = (out_idx * stride) as isize - pad as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + kernel as isize) as usize).min(limit);
    (lo, hi)
}

pub fn maxpool2d<S: Scalar>(x: &Tensor<S>, spec: PoolSpec) -> Result<Tensor<S>> {
    let out_shape = check_pool(x.shape(), spec)?;
    let mut out = Tensor::zeros(out_shape);
    let shape = x.shape();
    for n in 0..shape.n {
        for c in 0..shape.c {
            let plane = x.plane(n, c);
            let out_plane = out.plane_mut(n, c);
            for oy in 0..out_shape.h {
                let (y0, y1) = window(oy, spec.stride, spec.pad, spec.kernel, shape.h);
                for ox in 0..out_shape.w {
                    let (x0, x1) = window(ox, spec.stride, spec.pad, spec.kernel, shape.w);
                    let mut best = S::neg_infinity();
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let v = plane[iy * shape.w + ix];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out_plane[oy * out_shape.w + ox] = best;
                }
            }
        }
    }
    Ok(out)
}

pub fn maxpool2d_backward<S: Scalar>(
    x: &Tensor<S>,
    spec: PoolSpec,
    dy: &Tensor<S>,
) -> Result<Tensor<S>> {
    let out_shape = check_pool(x.shape(), spec)?;
    debug_assert_eq!(out_shape, dy.shape());
    let shape = x.shape();
    let mut dx = vec![0.0f64; shape.numel()];
    for n in 0..shape.n {
        for c in 0..shape.c {
            let plane = x.plane(n, c);
            let plane_base = (n * shape.c + c) * shape.h * shape.w;
            let dy_plane = dy.plane(n, c);
            for oy in 0..out_shape.h {
                let (y0, y1) = window(oy, spec.stride, spec.pad, spec.kernel, shape.h);
                for ox in 0..out_shape.w {
                    let (x0, x1) = window(ox, spec.stride, spec.pad, spec.kernel, shape.w);
                    let mut best = S::neg_infinity();
                    let mut best_at = y0 * shape.w + x0;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let idx = iy * shape.w + ix;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_at = idx;
                            }
                        }
                    }
                    dx[plane_base + best_at] += dy_plane[oy * out_shape.w + ox].as_f64();
                }
            }
        }
    }
    Tensor::from_vec(shape, dx.into_iter().map(S::from_f64).collect())
}

pub fn avgpool2d<S: Scalar>(x: &Tensor<S>, spec: PoolSpec) -> Result<Tensor<S>> {
    let out_shape = check_pool(x.shape(), spec)?;
    let mut out = Tensor::zeros(out_shape);
    let shape = x.shape();
    for n in 0..shape.n {
        for c in 0..shape.c {
            let plane = x.plane(n, c);
            let out_plane = out.plane_mut(n, c);
            for oy in 0..out_shape.h {
                let (y0, y1) = window(oy, spec.stride, spec.pad, spec.kernel, shape.h);
                for ox in 0..out_shape.w {
                    let (x0, x1) = window(ox, spec.stride, spec.pad, spec.kernel, shape.w);
                    let mut sum = 0.0f64;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            sum += plane[iy * shape.w + ix].as_f64();
                        }
                    }
                    let count = ((y1 - y0) * (x1 - x0)) as f64;
                    out_plane[oy * out_shape.w + ox] = S::from_f64(sum / count);
                }
            }
        }
    }
    Ok(out)
}

pub fn avgpool2d_backward<S: Scalar>(
    in_shape: Shape4,
    spec: PoolSpec,
    dy: &Tensor<S>,
) -> Result<Tensor<S>> {
    let out_shape = check_pool(in_shape, spec)?;
    debug_assert_eq!(out_shape, dy.shape());
    let mut dx = vec![0.0f64; in_shape.numel()];
    for n in 0..in_shape.n {
        for c in 0..in_shape.c {
            let plane_base = (n * in_shape.c + c) * in_shape.h * in_shape.w;
            let dy_plane = dy.plane(n, c);
            for oy in 0..out_shape.h {
                let (y0, y1) = window(oy, spec.stride, spec.pad, spec.kernel, in_shape.h);
                for ox in 0..out_shape.w {
                    let (x0, x1) = window(ox, spec.stride, spec.pad, spec.kernel, in_shape.w);
                    let count = ((y1 - y0) * (x1 - x0)) as f64;
                    let g = dy_plane[oy * out_shape.w + ox].as_f64() / count;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            dx[plane_base + iy * in_shape.w + ix] += g;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(in_shape, dx.into_iter().map(S::from_f64).collect())
}

/// Collapses each channel plane to its mean: (n, c, h, w) -> (n, c, 1, 1).
pub fn global_avgpool<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let shape = x.shape();
    let count = (shape.h * shape.w) as f64;
    let mut out = Tensor::zeros(Shape4::new(shape.n, shape.c, 1, 1));
    for n in 0..shape.n {
        for c in 0..shape.c {
            let sum: f64 = x.plane(n, c).iter().map(|v| v.as_f64()).sum();
            out.set(n, c, 0, 0, S::from_f64(sum / count));
        }
    }
    out
}

pub fn global_avgpool_backward<S: Scalar>(in_shape: Shape4, dy: &Tensor<S>) -> Tensor<S> {
    debug_assert_eq!(dy.shape(), Shape4::new(in_shape.n, in_shape.c, 1, 1));
    let count = (in_shape.h * in_shape.w) as f64;
    let mut dx = Tensor::zeros(in_shape);
    for n in 0..in_shape.n {
        for c in 0..in_shape.c {
            let g = S::from_f64(dy.get(n, c, 0, 0).as_f64() / count);
            for v in dx.plane_mut(n, c) {
                *v = g;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp4x4() -> Tensor<f64> {
        Tensor::from_vec(Shape4::new(1, 1, 4, 4), (0..16).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn avgpool_2x2_stride2_ramp() {
        let y = avgpool2d(&ramp4x4(), PoolSpec::new(2, 2, 0)).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn maxpool_3x3_stride2_pad1_ramp() {
        let y = maxpool2d(&ramp4x4(), PoolSpec::new(3, 2, 1)).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn avgpool_divisor_excludes_padding() {
        let ones = Tensor::<f64>::filled(Shape4::new(1, 1, 4, 4), 1.0);
        let y = avgpool2d(&ones, PoolSpec::new(3, 2, 1)).unwrap();
        // Corner windows see only 4 valid ones; mean must still be exactly 1.
        for &v in y.data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn maxpool_backward_ties_go_to_first_scan_position() {
        let x = Tensor::<f64>::filled(Shape4::new(1, 1, 2, 2), 3.0);
        let dy = Tensor::filled(Shape4::new(1, 1, 1, 1), 1.0);
        let dx = maxpool2d_backward(&x, PoolSpec::new(2, 1, 0), &dy).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn avgpool_backward_spreads_by_window_count() {
        let dy = Tensor::<f64>::filled(Shape4::new(1, 1, 2, 2), 1.0);
        let dx = avgpool2d_backward(Shape4::new(1, 1, 4, 4), PoolSpec::new(2, 2, 0), &dy).unwrap();
        for &v in dx.data() {
            assert_eq!(v, 0.25);
        }
    }

    #[test]
    fn global_avgpool_mean_and_backward() {
        let x = ramp4x4();
        let y = global_avgpool(&x);
        assert_eq!(y.get(0, 0, 0, 0), 7.5);
        let dy = Tensor::filled(Shape4::new(1, 1, 1, 1), 16.0);
        let dx = global_avgpool_backward(x.shape(), &dy);
        for &v in dx.data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn pad_must_be_under_kernel() {
        let x = Tensor::<f32>::zeros(Shape4::new(1, 1, 4, 4));
        assert!(maxpool2d(&x, PoolSpec::new(2, 2, 2)).is_err());
    }
}
