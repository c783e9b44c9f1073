//! Batch normalization over (n, h, w) per channel.
//!
//! Variance is biased (divide by the element count) both for normalization
//! and for the running-statistics update. All reductions run in f64.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor};

/// Per-channel batch statistics captured by the training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Biased variance (sum of squared deviations / count).
    pub var: Vec<f64>,
}

fn check_affine<S: Scalar>(x: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>) -> Result<()> {
    let c = x.shape().c;
    let want = Shape4::new(1, c, 1, 1);
    if gamma.shape() != want || beta.shape() != want {
        return Err(Error::config(format!(
            "batchnorm affine params must be {}, got gamma {} beta {}",
            want,
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

fn check_stats<S: Scalar>(x: &Tensor<S>, mean: &Tensor<S>, var: &Tensor<S>) -> Result<()> {
    let want = Shape4::new(1, x.shape().c, 1, 1);
    if mean.shape() != want || var.shape() != want {
        return Err(Error::config(format!(
            "batchnorm stats must be {}, got mean {} var {}",
            want,
            mean.shape(),
            var.shape()
        )));
    }
    Ok(())
}

fn compute_batch_stats<S: Scalar>(x: &Tensor<S>) -> BnBatchStats {
    let shape = x.shape();
    let count = (shape.n * shape.h * shape.w) as f64;
    let mut mean = vec![0.0f64; shape.c];
    let mut var = vec![0.0f64; shape.c];
    for c in 0..shape.c {
        let mut sum = 0.0f64;
        for n in 0..shape.n {
            for &v in x.plane(n, c) {
                sum += v.as_f64();
            }
        }
        let m = sum / count;
        let mut sq = 0.0f64;
        for n in 0..shape.n {
            for &v in x.plane(n, c) {
                let d = v.as_f64() - m;
                sq += d * d;
            }
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    BnBatchStats { mean, var }
}

fn normalize<S: Scalar>(
    x: &Tensor<S>,
    mean: &[f64],
    var: &[f64],
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Tensor<S> {
    let shape = x.shape();
    let mut out = Tensor::zeros(shape);
    for c in 0..shape.c {
        let inv_std = 1.0 / (var[c] + eps).sqrt();
        let g = gamma.get(0, c, 0, 0).as_f64();
        let b = beta.get(0, c, 0, 0).as_f64();
        for n in 0..shape.n {
            for (o, &v) in out.plane_mut(n, c).iter_mut().zip(x.plane(n, c)) {
                *o = S::from_f64((v.as_f64() - mean[c]) * inv_std * g + b);
            }
        }
    }
    out
}

/// Normalizes with statistics computed from this batch and returns them.
pub fn batchnorm2d_train<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<(Tensor<S>, BnBatchStats)> {
    check_affine(x, gamma, beta)?;
    let stats = compute_batch_stats(x);
    let y = normalize(x, &stats.mean, &stats.var, gamma, beta, eps);
    Ok((y, stats))
}

/// Normalizes with fixed (running) statistics held in (1, c, 1, 1) buffers.
pub fn batchnorm2d_eval<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    mean: &Tensor<S>,
    var: &Tensor<S>,
    eps: f64,
) -> Result<Tensor<S>> {
    check_affine(x, gamma, beta)?;
    check_stats(x, mean, var)?;
    let mean_f: Vec<f64> = mean.data().iter().map(|v| v.as_f64()).collect();
    let var_f: Vec<f64> = var.data().iter().map(|v| v.as_f64()).collect();
    Ok(normalize(x, &mean_f, &var_f, gamma, beta, eps))
}

/// running <- (1 - momentum) * running + momentum * batch.
pub fn update_running_stats<S: Scalar>(
    running_mean: &mut Tensor<S>,
    running_var: &mut Tensor<S>,
    stats: &BnBatchStats,
    momentum: f64,
) {
    debug_assert_eq!(running_mean.numel(), stats.mean.len());
    debug_assert_eq!(running_var.numel(), stats.var.len());
    for (r, &b) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
        *r = S::from_f64((1.0 - momentum) * r.as_f64() + momentum * b);
    }
    for (r, &b) in running_var.data_mut().iter_mut().zip(&stats.var) {
        *r = S::from_f64((1.0 - momentum) * r.as_f64() + momentum * b);
    }
}

/// Backward through training-mode normalization (statistics depend on x).
pub fn batchnorm2d_train_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    stats: &BnBatchStats,
    eps: f64,
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let shape = x.shape();
    let count = (shape.n * shape.h * shape.w) as f64;
    let mut dx = Tensor::zeros(shape);
    let mut dgamma = Tensor::zeros(gamma.shape());
    let mut dbeta = Tensor::zeros(gamma.shape());
    for c in 0..shape.c {
        let inv_std = 1.0 / (stats.var[c] + eps).sqrt();
        let mean = stats.mean[c];
        let g = gamma.get(0, c, 0, 0).as_f64();
        // First pass: sum(dy) and sum(dy * x_hat).
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for n in 0..shape.n {
            for (&d, &v) in dy.plane(n, c).iter().zip(x.plane(n, c)) {
                let xhat = (v.as_f64() - mean) * inv_std;
                sum_dy += d.as_f64();
                sum_dy_xhat += d.as_f64() * xhat;
            }
        }
        dbeta.set(0, c, 0, 0, S::from_f64(sum_dy));
        dgamma.set(0, c, 0, 0, S::from_f64(sum_dy_xhat));
        // Second pass: dx = g * inv_std * (dy - mean(dy) - x_hat * mean(dy * x_hat)).
        let mean_dy = sum_dy / count;
        let mean_dy_xhat = sum_dy_xhat / count;
        for n in 0..shape.n {
            let x_plane = x.plane(n, c).to_vec();
            for ((o, &d), &v) in dx
                .plane_mut(n, c)
                .iter_mut()
                .zip(dy.plane(n, c))
                .zip(&x_plane)
            {
                let xhat = (v.as_f64() - mean) * inv_std;
                let val = g * inv_std * (d.as_f64() - mean_dy - xhat * mean_dy_xhat);
                *o = S::from_f64(val);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Backward through eval-mode normalization (statistics are constants).
pub fn batchnorm2d_eval_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    mean: &Tensor<S>,
    var: &Tensor<S>,
    eps: f64,
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let shape = x.shape();
    let mut dx = Tensor::zeros(shape);
    let mut dgamma = Tensor::zeros(gamma.shape());
    let mut dbeta = Tensor::zeros(gamma.shape());
    for c in 0..shape.c {
        let m = mean.get(0, c, 0, 0).as_f64();
        let inv_std = 1.0 / (var.get(0, c, 0, 0).as_f64() + eps).sqrt();
        let g = gamma.get(0, c, 0, 0).as_f64();
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for n in 0..shape.n {
            let x_plane = x.plane(n, c).to_vec();
            for ((o, &d), &v) in dx
                .plane_mut(n, c)
                .iter_mut()
                .zip(dy.plane(n, c))
                .zip(&x_plane)
            {
                let xhat = (v.as_f64() - m) * inv_std;
                sum_dy += d.as_f64();
                sum_dy_xhat += d.as_f64() * xhat;
                *o = S::from_f64(d.as_f64() * g * inv_std);
            }
        }
        dbeta.set(0, c, 0, 0, S::from_f64(sum_dy));
        dgamma.set(0, c, 0, 0, S::from_f64(sum_dy_xhat));
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape4) -> Tensor<f64> {
        Tensor::from_vec(shape, (0..shape.numel()).map(|i| i as f64 * 0.37).collect()).unwrap()
    }

    #[test]
    fn train_output_is_standardized() {
        let x = ramp(Shape4::new(2, 3, 4, 4));
        let gamma = Tensor::filled(Shape4::new(1, 3, 1, 1), 1.0);
        let beta = Tensor::zeros(Shape4::new(1, 3, 1, 1));
        let (y, _) = batchnorm2d_train(&x, &gamma, &beta, 1e-5).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|n| y.plane(n, c).to_vec()).collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
        }
    }

    #[test]
    fn eval_matches_manual_formula() {
        let x = Tensor::from_vec(Shape4::new(1, 1, 1, 2), vec![3.0f64, 7.0]).unwrap();
        let gamma = Tensor::from_channels(&[2.0]);
        let beta = Tensor::from_channels(&[0.5]);
        let mean = Tensor::from_channels(&[5.0]);
        let var = Tensor::from_channels(&[4.0]);
        let y = batchnorm2d_eval(&x, &gamma, &beta, &mean, &var, 0.0).unwrap();
        // (3-5)/2 * 2 + 0.5 = -1.5 ; (7-5)/2 * 2 + 0.5 = 2.5
        assert!((y.data()[0] - -1.5).abs() < 1e-12);
        assert!((y.data()[1] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn running_update_blends_with_momentum() {
        let mut mean = Tensor::from_channels(&[0.0f64]);
        let mut var = Tensor::from_channels(&[1.0f64]);
        let stats = BnBatchStats { mean: vec![10.0], var: vec![5.0] };
        update_running_stats(&mut mean, &mut var, &stats, 0.1);
        assert!((mean.data()[0] - 1.0).abs() < 1e-12);
        assert!((var.data()[0] - 1.4).abs() < 1e-12);
    }

    #[test]
    fn train_backward_constant_dy_gives_zero_dx() {
        // For constant dy the projection terms cancel exactly.
        let x = ramp(Shape4::new(1, 2, 3, 3));
        let gamma = Tensor::filled(Shape4::new(1, 2, 1, 1), 1.3);
        let beta = Tensor::zeros(Shape4::new(1, 2, 1, 1));
        let (_, stats) = batchnorm2d_train(&x, &gamma, &beta, 1e-5).unwrap();
        let dy = Tensor::filled(x.shape(), 0.7);
        let (dx, _, dbeta) = batchnorm2d_train_backward(&x, &gamma, &stats, 1e-5, &dy);
        for &v in dx.data() {
            assert!(v.abs() < 1e-12, "dx should vanish, got {v}");
        }
        assert!((dbeta.get(0, 0, 0, 0) - 0.7 * 9.0).abs() < 1e-12);
    }

    #[test]
    fn affine_shape_mismatch_rejected() {
        let x = Tensor::<f32>::zeros(Shape4::new(1, 3, 2, 2));
        let bad = Tensor::<f32>::zeros(Shape4::new(1, 2, 1, 1));
        let beta = Tensor::<f32>::zeros(Shape4::new(1, 3, 1, 1));
        assert!(batchnorm2d_train(&x, &bad, &beta, 1e-5).is_err());
    }
}
