//! Dense 4-D tensors in (n, c, h, w) layout, row-major.

pub mod io;
pub mod ops;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shape of a 4-D tensor: batch, channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4 { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::config(format!("all dimensions must be >= 1, got {self}")));
        }
        Ok(())
    }

    /// Flat index of (n, c, y, x).
    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D tensor. The only numeric currency of the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Shape4,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: Shape4) -> Tensor<S> {
        Tensor { shape, data: vec![S::zero(); shape.numel()] }
    }

    pub fn filled(shape: Shape4, v: S) -> Tensor<S> {
        Tensor { shape, data: vec![v; shape.numel()] }
    }

    pub fn from_vec(shape: Shape4, data: Vec<S>) -> Result<Tensor<S>> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::config(format!(
                "data length {} does not match shape {} = {} elements",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Per-channel vector as a (1, c, 1, 1) tensor; used for BN statistics and biases.
    pub fn from_channels(values: &[S]) -> Tensor<S> {
        Tensor {
            shape: Shape4::new(1, values.len(), 1, 1),
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> S {
        self.data[self.shape.at(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: S) {
        let i = self.shape.at(n, c, y, x);
        self.data[i] = v;
    }

    /// Channel plane (h*w contiguous values) of image `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[S] {
        let hw = self.shape.h * self.shape.w;
        let start = (n * self.shape.c + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [S] {
        let hw = self.shape.h * self.shape.w;
        let start = (n * self.shape.c + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, a: S) -> Tensor<S> {
        self.map(|v| v * a)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossy element cast; exact when widening f32 -> f64.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> Option<(f64, usize)> {
        if self.shape != other.shape {
            return None;
        }
        let mut best = (0.0f64, 0usize);
        for (i, (a, b)) in self.data.iter().zip(other.data.iter()).enumerate() {
            let d = (a.as_f64() - b.as_f64()).abs();
            if d > best.0 {
                best = (d, i);
            }
        }
        Some(best)
    }
}
