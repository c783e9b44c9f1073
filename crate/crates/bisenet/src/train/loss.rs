//! Pixel-wise classification losses over logit maps.
//!
//! Both losses return the scalar loss together with its exact gradient with
//! respect to the logits, so the caller can seed the graph's backward pass
//! directly. Probabilities and per-pixel losses are computed in f64.

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Scalar loss plus its gradient with respect to the logits.
#[derive(Debug)]
pub struct LossOutput<S: Scalar> {
    pub loss: f64,
    pub grad: Tensor<S>,
    /// Number of pixels that contributed (non-ignored, and kept by mining).
    pub counted: usize,
}

struct PixelTerm {
    /// Flat (n, h, w) index.
    flat: usize,
    target: usize,
    /// -log softmax(target), in f64.
    loss: f64,
}

/// Computes per-pixel negative log-likelihoods and softmax distributions for
/// all non-ignored pixels. `probs` holds the full softmax per pixel (row per
/// spatial position, even ignored ones, to keep indexing simple).
fn per_pixel_losses<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[LabelMap],
    ignore: u32,
) -> Result<(Vec<PixelTerm>, Vec<f64>)> {
    let shape = logits.shape();
    let (n, c, h, w) = (shape.n, shape.c, shape.h, shape.w);
    if targets.len() != n {
        return Err(Error::config(format!(
            "{} label maps for batch of {n}",
            targets.len()
        )));
    }
    for (i, t) in targets.iter().enumerate() {
        if t.h != h || t.w != w {
            return Err(Error::config(format!(
                "label map {i} is {}x{}, logits are {h}x{w}",
                t.h, t.w
            )));
        }
    }
    let hw = h * w;
    let data = logits.data();
    let mut probs = vec![0.0f64; n * hw * c];
    let mut terms = Vec::new();
    for b in 0..n {
        let target = &targets[b];
        for y in 0..h {
            for x in 0..w {
                let pix = y * w + x;
                // Stable softmax over channels in f64.
                let mut max = f64::NEG_INFINITY;
                for ch in 0..c {
                    let v = data[((b * c + ch) * h + y) * w + x].as_f64();
                    if v > max {
                        max = v;
                    }
                }
                let mut denom = 0.0f64;
                let row = (b * hw + pix) * c;
                for ch in 0..c {
                    let v = data[((b * c + ch) * h + y) * w + x].as_f64();
                    let e = (v - max).exp();
                    probs[row + ch] = e;
                    denom += e;
                }
                for ch in 0..c {
                    probs[row + ch] /= denom;
                }
                let label = target.get(y, x);
                if label == ignore {
                    continue;
                }
                let label = label as usize;
                if label >= c {
                    return Err(Error::config(format!(
                        "label {label} out of range for {c} classes"
                    )));
                }
                let p = probs[row + label].max(f64::MIN_POSITIVE);
                terms.push(PixelTerm { flat: b * hw + pix, target: label, loss: -p.ln() });
            }
        }
    }
    Ok((terms, probs))
}

/// Assembles the mean loss and logit gradient from a chosen subset of pixel
/// terms. Pixels outside `kept` get zero gradient.
fn assemble<S: Scalar>(
    logits: &Tensor<S>,
    kept: &[&PixelTerm],
    probs: &[f64],
) -> LossOutput<S> {
    let shape = logits.shape();
    let (c, h, w) = (shape.c, shape.h, shape.w);
    let hw = h * w;
    let mut grad = Tensor::<S>::zeros(shape);
    if kept.is_empty() {
        return LossOutput { loss: 0.0, grad, counted: 0 };
    }
    let count = kept.len() as f64;
    let mut total = 0.0f64;
    let gdata = grad.data_mut();
    for term in kept {
        total += term.loss;
        let b = term.flat / hw;
        let pix = term.flat % hw;
        let (y, x) = (pix / w, pix % w);
        let row = term.flat * c;
        for ch in 0..c {
            let onehot = if ch == term.target { 1.0 } else { 0.0 };
            let g = (probs[row + ch] - onehot) / count;
            gdata[((b * c + ch) * h + y) * w + x] = S::from_f64(g);
        }
    }
    LossOutput { loss: total / count, grad, counted: kept.len() }
}

/// Mean cross-entropy over all non-ignored pixels.
pub fn cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[LabelMap],
    ignore: u32,
) -> Result<LossOutput<S>> {
    let (terms, probs) = per_pixel_losses(logits, targets, ignore)?;
    let kept: Vec<&PixelTerm> = terms.iter().collect();
    Ok(assemble(logits, &kept, &probs))
}

/// Cross-entropy with online hard-example mining.
///
/// A pixel is hard when the predicted probability of its true class is
/// below `threshold` (equivalently, its loss is at least `-ln(threshold)`).
/// If fewer than `min_kept` pixels qualify, the hardest `min_kept` pixels
/// are kept instead (capped by the number of non-ignored pixels). Ties in
/// loss are broken by ascending pixel index, so the kept set is fully
/// deterministic. With `threshold = 1.0` every non-ignored pixel qualifies
/// and the loss equals plain cross-entropy.
pub fn ohem_cross_entropy<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[LabelMap],
    ignore: u32,
    threshold: f64,
    min_kept: usize,
) -> Result<LossOutput<S>> {
    if !(0.0 < threshold && threshold <= 1.0) {
        return Err(Error::config(format!(
            "mining threshold must be in (0, 1], got {threshold}"
        )));
    }
    let (terms, probs) = per_pixel_losses(logits, targets, ignore)?;
    let loss_floor = -threshold.ln();
    let mut hard: Vec<&PixelTerm> = terms.iter().filter(|t| t.loss >= loss_floor).collect();
    if hard.len() < min_kept && terms.len() > hard.len() {
        // Not enough hard pixels: fall back to the hardest `min_kept`
        // overall, ordered by descending loss then ascending index.
        let mut ranked: Vec<&PixelTerm> = terms.iter().collect();
        ranked.sort_by(|a, b| {
            b.loss
                .partial_cmp(&a.loss)
                .expect("pixel losses are finite")
                .then(a.flat.cmp(&b.flat))
        });
        ranked.truncate(min_kept.min(terms.len()));
        hard = ranked;
    }
    Ok(assemble(logits, &hard, &probs))
}

/// Fraction of non-ignored pixels whose argmax class matches the target.
/// Returns (correct, counted).
pub fn pixel_accuracy<S: Scalar>(
    logits: &Tensor<S>,
    target: &LabelMap,
    ignore: u32,
) -> Result<(usize, usize)> {
    let pred = crate::labels::argmax_channels(logits)?;
    if pred.h != target.h || pred.w != target.w {
        return Err(Error::config(format!(
            "prediction {}x{} vs target {}x{}",
            pred.h, pred.w, target.h, target.w
        )));
    }
    let mut correct = 0;
    let mut counted = 0;
    for y in 0..target.h {
        for x in 0..target.w {
            let t = target.get(y, x);
            if t == ignore {
                continue;
            }
            counted += 1;
            if pred.get(y, x) == t {
                correct += 1;
            }
        }
    }
    Ok((correct, counted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NormalSource;
    use crate::Shape4;

    fn random_logits(seed: u64, n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
        let mut src = NormalSource::new(seed, "test.logits");
        let mut t = Tensor::<f64>::zeros(Shape4::new(n, c, h, w));
        for v in t.data_mut() {
            *v = src.next();
        }
        t
    }

    fn checker_labels(h: usize, w: usize, classes: u32) -> LabelMap {
        let mut m = LabelMap::filled(h, w, 0);
        for y in 0..h {
            for x in 0..w {
                m.set(y, x, ((y + x) as u32) % classes);
            }
        }
        m
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut logits = random_logits(3, 2, 3, 4, 5);
        let labels = vec![checker_labels(4, 5, 3), checker_labels(4, 5, 3)];
        let out = cross_entropy(&logits, &labels, 255).unwrap();
        let h = 1e-6;
        for i in (0..logits.numel()).step_by(7) {
            let orig = logits.data()[i];
            logits.data_mut()[i] = orig + h;
            let up = cross_entropy(&logits, &labels, 255).unwrap().loss;
            logits.data_mut()[i] = orig - h;
            let down = cross_entropy(&logits, &labels, 255).unwrap().loss;
            logits.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(
                (out.grad.data()[i] - fd).abs() < 1e-8,
                "index {i}: analytic {} vs fd {fd}",
                out.grad.data()[i]
            );
        }
    }

    #[test]
    fn ignored_pixels_contribute_nothing() {
        let logits = random_logits(5, 1, 3, 4, 4);
        let mut labels = checker_labels(4, 4, 3);
        labels.set(0, 0, 255);
        labels.set(2, 3, 255);
        let out = cross_entropy(&logits, &[labels], 255).unwrap();
        assert_eq!(out.counted, 14);
        for c in 0..3 {
            assert_eq!(out.grad.get(0, c, 0, 0), 0.0);
            assert_eq!(out.grad.get(0, c, 2, 3), 0.0);
        }
    }

    #[test]
    fn all_ignored_gives_zero_loss_and_grad() {
        let logits = random_logits(6, 1, 3, 2, 2);
        let labels = LabelMap::filled(2, 2, 255);
        let out = cross_entropy(&logits, &[labels], 255).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.counted, 0);
        assert!(out.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn threshold_one_equals_plain_cross_entropy() {
        let logits = random_logits(7, 2, 3, 6, 6);
        let labels = vec![checker_labels(6, 6, 3), checker_labels(6, 6, 3)];
        let ce = cross_entropy(&logits, &labels, 255).unwrap();
        let ohem = ohem_cross_entropy(&logits, &labels, 255, 1.0, 0).unwrap();
        assert!((ce.loss - ohem.loss).abs() < 1e-12);
        assert_eq!(ce.counted, ohem.counted);
        for (a, b) in ce.grad.data().iter().zip(ohem.grad.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn min_kept_keeps_exactly_the_hardest_pixels() {
        let logits = random_logits(8, 1, 3, 4, 4);
        let labels = checker_labels(4, 4, 3);
        // Tiny threshold: no pixel qualifies on its own, so exactly
        // min_kept = 5 hardest pixels are kept.
        let out = ohem_cross_entropy(&logits, &[labels.clone()], 255, 1e-12, 5).unwrap();
        assert_eq!(out.counted, 5);

        // Oracle: recompute per-pixel losses and sort.
        let ce_all = cross_entropy(&logits, &[labels], 255).unwrap();
        let mut per_pixel: Vec<(f64, usize)> = Vec::new();
        for i in 0..16 {
            // Recover each pixel's loss by zeroing out all but one pixel is
            // awkward; instead recompute from softmax directly.
            let (y, x) = (i / 4, i % 4);
            let mut max = f64::NEG_INFINITY;
            for c in 0..3 {
                max = max.max(logits.get(0, c, y, x));
            }
            let mut denom = 0.0;
            for c in 0..3 {
                denom += (logits.get(0, c, y, x) - max).exp();
            }
            let t = ((y + x) % 3) as usize;
            let p = (logits.get(0, t, y, x) - max).exp() / denom;
            per_pixel.push((-p.ln(), i));
        }
        per_pixel.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expected: f64 = per_pixel[..5].iter().map(|(l, _)| l).sum::<f64>() / 5.0;
        assert!((out.loss - expected).abs() < 1e-12);
        // The 5 kept pixels are exactly those with nonzero gradient.
        let kept_set: Vec<usize> = per_pixel[..5].iter().map(|&(_, i)| i).collect();
        for i in 0..16 {
            let (y, x) = (i / 4, i % 4);
            let nonzero = (0..3).any(|c| out.grad.get(0, c, y, x) != 0.0);
            assert_eq!(nonzero, kept_set.contains(&i), "pixel {i}");
        }
        drop(ce_all);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let logits = random_logits(9, 1, 3, 2, 2);
        let labels = LabelMap::filled(2, 2, 7);
        assert!(cross_entropy(&logits, &[labels], 255).is_err());
    }
}
