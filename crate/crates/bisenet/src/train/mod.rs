//! Training loop: SGD with momentum, polynomial LR decay, weight decay on
//! convolution kernels, hard-example-mined cross-entropy on the main head,
//! and auxiliary supervision on every extra head the model exposes.

pub mod loss;
pub mod synth;

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, ParamGrads, ParamId};
use crate::model::OUTPUT_MAIN;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use loss::{cross_entropy, ohem_cross_entropy, pixel_accuracy, LossOutput};
use synth::{batch_from_samples, synth_sample, Augmentor};

/// Held-out samples start at this index so they never collide with
/// training indices (bounded by max_iter * batch).
const EVAL_INDEX_BASE: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch: usize,
    pub max_iter: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    /// Use online hard-example mining for every head.
    pub ohem: bool,
    /// Probability threshold below which a pixel counts as hard.
    pub ohem_threshold: f64,
    /// min_kept = batch * crop_h * crop_w / this divisor.
    pub ohem_min_kept_divisor: usize,
    pub ignore_label: u32,
    pub aux_weight: f64,
    pub crop_hw: (usize, usize),
    /// Scale jitter applied before cropping.
    pub scales: Vec<f64>,
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            batch: 4,
            max_iter: 300,
            base_lr: 5e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            ohem: true,
            ohem_threshold: 0.7,
            ohem_min_kept_divisor: 16,
            ignore_label: 255,
            aux_weight: 1.0,
            crop_hw: (64, 64),
            scales: vec![0.75, 1.0, 1.25, 1.5],
            flip: true,
        }
    }
}

impl TrainConfig {
    /// Settings calibrated for the synthetic 3-class demo task: 300
    /// iterations at batch 4 on 64x64 crops reach well over 90% held-out
    /// pixel accuracy with a steadily decreasing loss, in well under a
    /// minute of CPU time.
    pub fn toy() -> Self {
        TrainConfig { base_lr: 0.1, ..TrainConfig::default() }
    }

    pub fn min_kept(&self) -> usize {
        self.batch * self.crop_hw.0 * self.crop_hw.1 / self.ohem_min_kept_divisor
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("batch must be positive"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if !(0.0 < self.ohem_threshold && self.ohem_threshold <= 1.0) {
            return Err(Error::config("ohem_threshold must be in (0, 1]"));
        }
        if self.ohem_min_kept_divisor == 0 {
            return Err(Error::config("ohem_min_kept_divisor must be positive"));
        }
        if self.crop_hw.0 == 0 || self.crop_hw.1 == 0 {
            return Err(Error::config("crop size must be positive"));
        }
        // The two branches meet again after a 1/32 downsampling chain, so
        // training crops must tile evenly down to that resolution.
        if self.crop_hw.0 % 32 != 0 || self.crop_hw.1 % 32 != 0 {
            return Err(Error::config(format!(
                "crop size must be divisible by 32, got {}x{}",
                self.crop_hw.0, self.crop_hw.1
            )));
        }
        Ok(())
    }
}

/// Polynomial decay: base * (1 - iter/max_iter)^power.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    let frac = 1.0 - iter as f64 / max_iter as f64;
    base * frac.max(0.0).powf(power)
}

/// SGD with momentum. Weight decay is applied only to parameters flagged
/// for it (convolution kernels), never to BN affine parameters or biases.
pub struct Sgd<S: Scalar> {
    velocity: Vec<Option<Tensor<S>>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(graph: &Graph<S>, momentum: f64, weight_decay: f64) -> Self {
        Sgd { velocity: vec![None; graph.param_count()], momentum, weight_decay }
    }

    /// One update step. Parameters without a gradient this step are left
    /// untouched (their velocity does not decay either).
    pub fn step(&mut self, graph: &mut Graph<S>, grads: &ParamGrads<S>, lr: f64) {
        let mu = S::from_f64(self.momentum);
        let lr_s = S::from_f64(lr);
        for i in 0..graph.param_count() {
            let id = ParamId(i);
            let Some(grad) = grads.get(id) else { continue };
            let decay = if graph.param_def(id).decay {
                S::from_f64(self.weight_decay)
            } else {
                S::zero()
            };
            let v = self.velocity[i]
                .get_or_insert_with(|| Tensor::zeros(graph.param_def(id).shape));
            {
                let w = graph.param(id);
                for ((vi, &gi), &wi) in v.data_mut().iter_mut().zip(grad.data()).zip(w.data()) {
                    *vi = mu * *vi + gi + decay * wi;
                }
            }
            let w = graph.param_mut(id);
            for (wi, &vi) in w.data_mut().iter_mut().zip(v.data()) {
                *wi -= lr_s * vi;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct IterStat {
    pub iter: usize,
    pub lr: f64,
    pub loss_main: f64,
    pub loss_aux: f64,
    pub loss_total: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub history: Vec<IterStat>,
}

impl TrainReport {
    pub fn history_csv(&self) -> String {
        use std::fmt::Write;
        let mut s = String::from("iter,lr,loss_main,loss_aux,loss_total\n");
        for h in &self.history {
            writeln!(
                s,
                "{},{:.8},{:.8},{:.8},{:.8}",
                h.iter, h.lr, h.loss_main, h.loss_aux, h.loss_total
            )
            .unwrap();
        }
        s
    }

    /// Means of consecutive non-overlapping windows of `window` iterations.
    pub fn windowed_means(&self, window: usize) -> Vec<f64> {
        self.history
            .chunks(window)
            .filter(|c| c.len() == window)
            .map(|c| c.iter().map(|h| h.loss_total).sum::<f64>() / window as f64)
            .collect()
    }
}

fn head_loss<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[crate::labels::LabelMap],
    tcfg: &TrainConfig,
) -> Result<LossOutput<S>> {
    if tcfg.ohem {
        ohem_cross_entropy(
            logits,
            targets,
            tcfg.ignore_label,
            tcfg.ohem_threshold,
            tcfg.min_kept(),
        )
    } else {
        cross_entropy(logits, targets, tcfg.ignore_label)
    }
}

/// Runs the full training loop on synthetic data. The graph must already be
/// initialized; every graph output named `logits.*` other than the main one
/// is treated as an auxiliary head. `on_iter` observes each step.
pub fn train<S: Scalar>(
    graph: &mut Graph<S>,
    tcfg: &TrainConfig,
    mut on_iter: impl FnMut(&IterStat),
) -> Result<TrainReport> {
    tcfg.validate()?;
    if !graph.is_initialized() {
        return Err(Error::state("graph must be initialized before training"));
    }
    let main = OUTPUT_MAIN.to_string();
    if !graph.output_names().iter().any(|n| *n == main) {
        return Err(Error::config(format!("graph lacks output {main:?}")));
    }
    let aux_names: Vec<String> = graph
        .output_names()
        .iter()
        .filter(|n| n.starts_with("logits.aux."))
        .map(|n| n.to_string())
        .collect();
    let mut outputs: Vec<&str> = vec![&main];
    outputs.extend(aux_names.iter().map(|s| s.as_str()));

    let (crop_h, crop_w) = tcfg.crop_hw;
    let (gen_h, gen_w) = (crop_h * 3 / 2, crop_w * 3 / 2);
    let mut augmentor = Augmentor::new(tcfg.seed, tcfg.scales.clone(), tcfg.crop_hw, tcfg.flip);
    let mut sgd = Sgd::new(graph, tcfg.momentum, tcfg.weight_decay);
    let mut grads = graph.new_param_grads();
    let mut history = Vec::with_capacity(tcfg.max_iter);

    for iter in 0..tcfg.max_iter {
        let mut samples = Vec::with_capacity(tcfg.batch);
        for b in 0..tcfg.batch {
            let index = (iter * tcfg.batch + b) as u64;
            let (img, lab) = synth_sample::<S>(tcfg.seed, index, gen_h, gen_w);
            samples.push(augmentor.apply(&img, &lab)?);
        }
        let (batch, targets) = batch_from_samples(&samples)?;

        let trace = graph.forward_train(&[("input", &batch)], &outputs)?;
        let mut seed_storage: Vec<(String, Tensor<S>)> = Vec::with_capacity(outputs.len());
        let mut loss_main = 0.0;
        let mut loss_aux = 0.0;
        for name in &outputs {
            let node = graph
                .output_node(name)
                .ok_or_else(|| Error::state(format!("missing output {name}")))?;
            let logits = trace
                .value(node)
                .ok_or_else(|| Error::state(format!("output {name} not evaluated")))?;
            if !logits.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite logits in {name} at iteration {iter}"
                )));
            }
            let mut out = head_loss(logits, &targets, tcfg)?;
            if *name == main {
                loss_main = out.loss;
            } else {
                loss_aux += tcfg.aux_weight * out.loss;
                if tcfg.aux_weight != 1.0 {
                    out.grad = out.grad.scale(S::from_f64(tcfg.aux_weight));
                }
            }
            seed_storage.push((name.to_string(), out.grad));
        }
        let seeds: Vec<(&str, &Tensor<S>)> =
            seed_storage.iter().map(|(n, g)| (n.as_str(), g)).collect();
        grads.clear();
        graph.backward(&trace, &seeds, &mut grads)?;

        let lr = poly_lr(tcfg.base_lr, iter, tcfg.max_iter, tcfg.poly_power);
        sgd.step(graph, &grads, lr);

        let stat = IterStat {
            iter,
            lr,
            loss_main,
            loss_aux,
            loss_total: loss_main + loss_aux,
        };
        if !stat.loss_total.is_finite() {
            return Err(Error::Numeric(format!(
                "loss diverged at iteration {iter}: {}",
                stat.loss_total
            )));
        }
        on_iter(&stat);
        history.push(stat);
    }
    Ok(TrainReport { history })
}

/// Pixel accuracy over `count` held-out synthetic samples (indices disjoint
/// from any training index), evaluated with running BN statistics.
pub fn evaluate<S: Scalar>(
    graph: &Graph<S>,
    seed: u64,
    count: usize,
    hw: (usize, usize),
    ignore: u32,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut counted = 0usize;
    for i in 0..count {
        let (img, lab) = synth_sample::<S>(seed, EVAL_INDEX_BASE + i as u64, hw.0, hw.1);
        let trace = graph.forward(&[("input", &img)], &[OUTPUT_MAIN], Mode::Eval)?;
        let node = graph.output_node(OUTPUT_MAIN).expect("main output");
        let logits = trace.value(node).expect("evaluated");
        let (c, n) = pixel_accuracy(logits, &lab, ignore)?;
        correct += c;
        counted += n;
    }
    if counted == 0 {
        return Err(Error::state("no pixels to evaluate"));
    }
    Ok(correct as f64 / counted as f64)
}
