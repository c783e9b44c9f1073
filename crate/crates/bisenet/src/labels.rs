//! Dense class-label maps and conversions from logits.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u32>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::config("label map dims must be positive"));
        }
        if data.len() != h * w {
            return Err(Error::config(format!(
                "label map {}x{} needs {} entries, got {}",
                h,
                w,
                h * w,
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, label: u32) -> Self {
        Self { h, w, data: vec![label; h * w] }
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u32) {
        self.data[y * self.w + x] = label;
    }

    /// Nearest-neighbor resize with half-pixel source mapping.
    pub fn resize_nearest(&self, oh: usize, ow: usize) -> Result<LabelMap> {
        if oh == 0 || ow == 0 {
            return Err(Error::config("resize target must be positive"));
        }
        let ry = self.h as f64 / oh as f64;
        let rx = self.w as f64 / ow as f64;
        let mut data = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            let sy = (((y as f64 + 0.5) * ry) as usize).min(self.h - 1);
            for x in 0..ow {
                let sx = (((x as f64 + 0.5) * rx) as usize).min(self.w - 1);
                data.push(self.get(sy, sx));
            }
        }
        Ok(LabelMap { h: oh, w: ow, data })
    }

    pub fn flip_horizontal(&self) -> LabelMap {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.h {
            for x in 0..self.w {
                data.push(self.get(y, self.w - 1 - x));
            }
        }
        LabelMap { h: self.h, w: self.w, data }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<LabelMap> {
        if y0 + h > self.h || x0 + w > self.w {
            return Err(Error::config(format!(
                "crop {h}x{w}+{y0}+{x0} exceeds {}x{}",
                self.h, self.w
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(self.get(y0 + y, x0 + x));
            }
        }
        LabelMap::new(h, w, data)
    }
}

/// Per-pixel argmax over the channel axis of a single-image logits tensor.
/// Ties resolve to the lowest class index.
pub fn argmax_channels<S: Scalar>(logits: &Tensor<S>) -> Result<LabelMap> {
    let shape = logits.shape();
    if shape.n != 1 {
        return Err(Error::config(format!(
            "argmax expects a single image, got batch {}",
            shape.n
        )));
    }
    let mut data = vec![0u32; shape.h * shape.w];
    let mut best = logits.plane(0, 0).to_vec();
    for c in 1..shape.c {
        for (i, &v) in logits.plane(0, c).iter().enumerate() {
            if v > best[i] {
                best[i] = v;
                data[i] = c as u32;
            }
        }
    }
    LabelMap::new(shape.h, shape.w, data)
}

/// Gray level used when rendering label maps to images: spread classes
/// evenly over [0, 255].
pub fn label_to_gray(label: u32, classes: usize) -> u8 {
    let step = 255 / (classes.max(2) - 1) as u32;
    (label * step).min(255) as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn argmax_picks_highest_and_breaks_ties_low() {
        let logits = Tensor::from_vec(
            Shape4::new(1, 3, 1, 2),
            vec![
                1.0f32, 5.0, // class 0
                1.0, 2.0, // class 1 (ties class 0 at pixel 0)
                0.5, 7.0, // class 2
            ],
        )
        .unwrap();
        let labels = argmax_channels(&logits).unwrap();
        assert_eq!(labels.data, vec![0, 2]);
    }

    #[test]
    fn nearest_resize_down_and_up_round_trips_blocks() {
        let m = LabelMap::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let up = m.resize_nearest(4, 4).unwrap();
        assert_eq!(up.get(0, 0), 0);
        assert_eq!(up.get(0, 3), 1);
        assert_eq!(up.get(3, 0), 2);
        assert_eq!(up.get(3, 3), 3);
        let down = up.resize_nearest(2, 2).unwrap();
        assert_eq!(down, m);
    }

    #[test]
    fn flip_and_crop() {
        let m = LabelMap::new(2, 3, vec![0, 1, 2, 3, 4, 5]).unwrap();
        assert_eq!(m.flip_horizontal().data, vec![2, 1, 0, 5, 4, 3]);
        let c = m.crop(0, 1, 2, 2).unwrap();
        assert_eq!(c.data, vec![1, 2, 4, 5]);
        assert!(m.crop(1, 1, 2, 2).is_err());
    }

    #[test]
    fn gray_levels_spread_over_full_range() {
        assert_eq!(label_to_gray(0, 3), 0);
        assert_eq!(label_to_gray(1, 3), 127);
        assert_eq!(label_to_gray(2, 3), 254);
    }
}
