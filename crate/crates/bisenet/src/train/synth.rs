//! Deterministic synthetic segmentation data: color-coded shapes on a
//! noisy background, fully reproducible from (seed, sample index).
//!
//! Each sample contains a background (class 0), one disk (class 1), and
//! one axis-aligned box (class 2, drawn on top). Classes are separated by
//! color but perturbed by per-pixel noise, a global brightness shift, and
//! a horizontal illumination gradient, so the task is learnable without
//! being trivial.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::rng::{stream_for, NormalSource};
use crate::scalar::Scalar;
use crate::tensor::ops::resize_bilinear;
use crate::tensor::{Shape4, Tensor};

pub const SYNTH_CLASSES: usize = 3;

/// Mean RGB per class; chosen well apart so color carries the label.
const CLASS_COLORS: [[f64; 3]; SYNTH_CLASSES] = [
    [0.15, 0.25, 0.75],
    [0.80, 0.30, 0.20],
    [0.25, 0.75, 0.30],
];
const NOISE_SIGMA: f64 = 0.08;

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Generates sample `index` of the stream identified by `seed`, at the
/// requested spatial size. Same arguments always produce the same pixels.
pub fn synth_sample<S: Scalar>(seed: u64, index: u64, h: usize, w: usize) -> (Tensor<S>, LabelMap) {
    let mut geom = stream_for(seed, &format!("synth.{index}.geom"));
    let mut noise = NormalSource::new(seed, &format!("synth.{index}.noise"));

    let dim = h.min(w) as f64;
    let cy = uniform(&mut geom, 0.25, 0.75) * h as f64;
    let cx = uniform(&mut geom, 0.25, 0.75) * w as f64;
    let radius = uniform(&mut geom, 0.15, 0.30) * dim;

    let bh = (uniform(&mut geom, 0.20, 0.45) * h as f64) as usize;
    let bw = (uniform(&mut geom, 0.20, 0.45) * w as f64) as usize;
    let by = (uniform(&mut geom, 0.0, 1.0) * (h - bh) as f64) as usize;
    let bx = (uniform(&mut geom, 0.0, 1.0) * (w - bw) as f64) as usize;

    let brightness = uniform(&mut geom, -0.10, 0.10);
    let gradient = uniform(&mut geom, -0.08, 0.08);

    let mut label = LabelMap::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            if dy * dy + dx * dx <= radius * radius {
                label.set(y, x, 1);
            }
        }
    }
    for y in by..by + bh {
        for x in bx..bx + bw {
            label.set(y, x, 2);
        }
    }

    let mut image = Tensor::<S>::zeros(Shape4::new(1, 3, h, w));
    for y in 0..h {
        for x in 0..w {
            let class = label.get(y, x) as usize;
            let shade = brightness + gradient * (x as f64 / w as f64 - 0.5);
            for c in 0..3 {
                let v = CLASS_COLORS[class][c] + shade + NOISE_SIGMA * noise.next();
                image.set(0, c, y, x, S::from_f64(v.clamp(0.0, 1.0)));
            }
        }
    }
    (image, label)
}

fn crop_tensor<S: Scalar>(
    x: &Tensor<S>,
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<S>> {
    let s = x.shape();
    if y0 + h > s.h || x0 + w > s.w {
        return Err(Error::config(format!(
            "crop {h}x{w}+{y0}+{x0} exceeds {}x{}",
            s.h, s.w
        )));
    }
    let mut out = Tensor::<S>::zeros(Shape4::new(s.n, s.c, h, w));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..h {
                for x_ in 0..w {
                    out.set(n, c, y, x_, x.get(n, c, y0 + y, x0 + x_));
                }
            }
        }
    }
    Ok(out)
}

fn flip_tensor<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let s = x.shape();
    let mut out = Tensor::<S>::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x_ in 0..s.w {
                    out.set(n, c, y, x_, x.get(n, c, y, s.w - 1 - x_));
                }
            }
        }
    }
    out
}

/// Random scale + crop + horizontal flip, driven by one deterministic
/// stream so a training run is reproducible end to end.
pub struct Augmentor {
    rng: ChaCha8Rng,
    pub scales: Vec<f64>,
    pub crop_hw: (usize, usize),
    pub flip: bool,
}

impl Augmentor {
    pub fn new(seed: u64, scales: Vec<f64>, crop_hw: (usize, usize), flip: bool) -> Self {
        Augmentor { rng: stream_for(seed, "augment"), scales, crop_hw, flip }
    }

    pub fn apply<S: Scalar>(
        &mut self,
        image: &Tensor<S>,
        label: &LabelMap,
    ) -> Result<(Tensor<S>, LabelMap)> {
        let (ch, cw) = self.crop_hw;
        let scale = if self.scales.is_empty() {
            1.0
        } else {
            self.scales[self.rng.gen_range(0..self.scales.len())]
        };
        let sh = ((image.shape().h as f64 * scale).round() as usize).max(ch);
        let sw = ((image.shape().w as f64 * scale).round() as usize).max(cw);
        let scaled = resize_bilinear(image, sh, sw)?;
        let scaled_label = label.resize_nearest(sh, sw)?;

        let y0 = if sh > ch { self.rng.gen_range(0..=sh - ch) } else { 0 };
        let x0 = if sw > cw { self.rng.gen_range(0..=sw - cw) } else { 0 };
        let mut img = crop_tensor(&scaled, y0, x0, ch, cw)?;
        let mut lab = scaled_label.crop(y0, x0, ch, cw)?;

        if self.flip && self.rng.gen::<f64>() < 0.5 {
            img = flip_tensor(&img);
            lab = lab.flip_horizontal();
        }
        Ok((img, lab))
    }
}

/// Stacks single-image tensors (each (1, c, h, w)) into one batch tensor.
pub fn batch_from_samples<S: Scalar>(
    samples: &[(Tensor<S>, LabelMap)],
) -> Result<(Tensor<S>, Vec<LabelMap>)> {
    let Some((first, _)) = samples.first() else {
        return Err(Error::config("empty batch"));
    };
    let s = first.shape();
    if s.n != 1 {
        return Err(Error::config("batch samples must have n=1"));
    }
    let mut out = Tensor::<S>::zeros(Shape4::new(samples.len(), s.c, s.h, s.w));
    let plane = s.c * s.h * s.w;
    let mut labels = Vec::with_capacity(samples.len());
    for (i, (img, lab)) in samples.iter().enumerate() {
        if img.shape() != s {
            return Err(Error::config(format!(
                "batch sample {i} has shape {}, expected {s}",
                img.shape()
            )));
        }
        out.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(img.data());
        labels.push(lab.clone());
    }
    Ok((out, labels))
}
