//! Activations, channel concatenation, and (broadcast) add / multiply.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor};

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Subgradient at exactly 0 is 0.
pub fn relu_backward<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &g)| if xv > S::zero() { g } else { S::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("relu_backward shapes match")
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| {
        let v = v.as_f64();
        let s = if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        };
        S::from_f64(s)
    })
}

/// Takes the forward *output* `y`: d/dx sigmoid = y * (1 - y).
pub fn sigmoid_backward<S: Scalar>(y: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&yv, &g)| g * yv * (S::one() - yv))
        .collect();
    Tensor::from_vec(y.shape(), data).expect("sigmoid_backward shapes match")
}

pub fn concat_channels<S: Scalar>(xs: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::config("concat needs at least one input"))?;
    let base = first.shape();
    let mut c_total = 0;
    for x in xs {
        let s = x.shape();
        if s.n != base.n || s.h != base.h || s.w != base.w {
            return Err(Error::config(format!(
                "concat inputs must share (n,h,w): {} vs {}",
                base, s
            )));
        }
        c_total += s.c;
    }
    let out_shape = Shape4::new(base.n, c_total, base.h, base.w);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..base.n {
        let mut co = 0;
        for x in xs {
            for c in 0..x.shape().c {
                out.plane_mut(n, co).copy_from_slice(x.plane(n, c));
                co += 1;
            }
        }
    }
    Ok(out)
}

/// Splits `dy` back into per-input gradients along the channel axis.
pub fn concat_backward<S: Scalar>(input_shapes: &[Shape4], dy: &Tensor<S>) -> Vec<Tensor<S>> {
    let mut grads: Vec<Tensor<S>> = input_shapes.iter().map(|&s| Tensor::zeros(s)).collect();
    let n = dy.shape().n;
    for ni in 0..n {
        let mut co = 0;
        for (gi, shape) in input_shapes.iter().enumerate() {
            for c in 0..shape.c {
                grads[gi].plane_mut(ni, c).copy_from_slice(dy.plane(ni, co));
                co += 1;
            }
        }
    }
    grads
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    /// Left operand is (n, c, 1, 1), spread over the right's spatial extent.
    Left,
    Right,
}

fn broadcast_kind(a: Shape4, b: Shape4) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::None);
    }
    if b.h == 1 && b.w == 1 && b.n == a.n && b.c == a.c {
        return Ok(Broadcast::Right);
    }
    if a.h == 1 && a.w == 1 && a.n == b.n && a.c == b.c {
        return Ok(Broadcast::Left);
    }
    Err(Error::config(format!(
        "incompatible shapes {a} and {b}: need equal shapes or one (n,c,1,1) operand"
    )))
}

fn zip_broadcast<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    match broadcast_kind(a.shape(), b.shape())? {
        Broadcast::None => {
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_vec(a.shape(), data)
        }
        Broadcast::Right => {
            let mut out = Tensor::zeros(a.shape());
            for n in 0..a.shape().n {
                for c in 0..a.shape().c {
                    let bv = b.get(n, c, 0, 0);
                    for (o, &x) in out.plane_mut(n, c).iter_mut().zip(a.plane(n, c)) {
                        *o = f(x, bv);
                    }
                }
            }
            Ok(out)
        }
        Broadcast::Left => {
            let mut out = Tensor::zeros(b.shape());
            for n in 0..b.shape().n {
                for c in 0..b.shape().c {
                    let av = a.get(n, c, 0, 0);
                    for (o, &y) in out.plane_mut(n, c).iter_mut().zip(b.plane(n, c)) {
                        *o = f(av, y);
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Elementwise sum; one operand may be (n, c, 1, 1) and is broadcast over space.
pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    zip_broadcast(a, b, |x, y| x + y)
}

pub fn add_backward<S: Scalar>(
    a_shape: Shape4,
    b_shape: Shape4,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let reduce = |shape: Shape4| -> Tensor<S> {
        if shape == dy.shape() {
            dy.clone()
        } else {
            let mut g = Tensor::zeros(shape);
            for n in 0..shape.n {
                for c in 0..shape.c {
                    let sum: f64 = dy.plane(n, c).iter().map(|v| v.as_f64()).sum();
                    g.set(n, c, 0, 0, S::from_f64(sum));
                }
            }
            g
        }
    };
    broadcast_kind(a_shape, b_shape)?;
    Ok((reduce(a_shape), reduce(b_shape)))
}

/// Elementwise product with the same broadcast rule as [`add`].
pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    zip_broadcast(a, b, |x, y| x * y)
}

pub fn mul_backward<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let grad_for = |this: &Tensor<S>, other: &Tensor<S>| -> Result<Tensor<S>> {
        if this.shape() == dy.shape() {
            // d(this) = dy * other, broadcasting other if needed.
            mul(dy, other)
        } else {
            // Broadcast operand: sum dy * other over the spatial extent.
            let mut g = Tensor::zeros(this.shape());
            for n in 0..this.shape().n {
                for c in 0..this.shape().c {
                    let sum: f64 = dy
                        .plane(n, c)
                        .iter()
                        .zip(other.plane(n, c))
                        .map(|(&d, &o)| d.as_f64() * o.as_f64())
                        .sum();
                    g.set(n, c, 0, 0, S::from_f64(sum));
                }
            }
            Ok(g)
        }
    };
    broadcast_kind(a.shape(), b.shape())?;
    Ok((grad_for(a, b)?, grad_for(b, a)?))
}
