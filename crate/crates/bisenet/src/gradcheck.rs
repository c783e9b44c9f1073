//! Finite-difference verification of analytic gradients.
//!
//! Every check reduces a graph output to a scalar through a fixed random
//! projection, L = sum(P ⊙ y), whose exact output-gradient is P itself.
//! Central differences then probe selected parameter (or input)
//! coordinates. Forward passes run in [`Mode::TrainFrozen`] by default so
//! repeated evaluation is pure.

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, ParamId};
use crate::rng::NormalSource;
use crate::tensor::{Shape4, Tensor};

/// |analytic - numeric| / max(1, |numeric|).
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Deterministic unit-scale projection tensor for scalarizing an output.
pub fn projection(shape: Shape4, seed: u64) -> Tensor<f64> {
    let mut src = NormalSource::new(seed, "fd.projection");
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| src.next()).collect())
        .expect("projection shape")
}

/// `count` evenly spaced flat coordinates in `[0, numel)`.
pub fn spread_coords(numel: usize, count: usize) -> Vec<usize> {
    if count == 0 || numel == 0 {
        return Vec::new();
    }
    if count >= numel {
        return (0..numel).collect();
    }
    (0..count).map(|i| i * numel / count).collect()
}

fn scalar_loss(
    graph: &Graph<f64>,
    inputs: &[(&str, &Tensor<f64>)],
    output: &str,
    proj: &Tensor<f64>,
    mode: Mode,
) -> Result<f64> {
    let trace = graph.forward(inputs, &[output], mode)?;
    let node = graph.output_node(output).expect("validated output");
    let y = trace.value(node).expect("requested output evaluated");
    if y.shape() != proj.shape() {
        return Err(Error::config(format!(
            "projection shape {} does not match output {}",
            proj.shape(),
            y.shape()
        )));
    }
    Ok(y.data().iter().zip(proj.data()).map(|(&a, &b)| a * b).sum())
}

/// Max relative error between analytic and central-difference gradients for
/// the given coordinates of one parameter. Empty `coords` means all.
pub fn check_param(
    graph: &mut Graph<f64>,
    inputs: &[(&str, &Tensor<f64>)],
    output: &str,
    proj: &Tensor<f64>,
    param: &str,
    coords: &[usize],
    mode: Mode,
) -> Result<f64> {
    let pid = graph
        .param_id(param)
        .ok_or_else(|| Error::config(format!("unknown parameter '{param}'")))?;
    let analytic = analytic_param_grad(graph, inputs, output, proj, pid, mode)?;
    let all: Vec<usize>;
    let coords = if coords.is_empty() {
        all = (0..analytic.numel()).collect();
        &all
    } else {
        coords
    };

    let mut worst = 0.0f64;
    for &i in coords {
        let x0 = graph.param(pid).data()[i];
        let h = 1e-5 * x0.abs().max(1.0);
        graph.param_mut(pid).data_mut()[i] = x0 + h;
        let up = scalar_loss(graph, inputs, output, proj, mode)?;
        graph.param_mut(pid).data_mut()[i] = x0 - h;
        let down = scalar_loss(graph, inputs, output, proj, mode)?;
        graph.param_mut(pid).data_mut()[i] = x0;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

fn analytic_param_grad(
    graph: &Graph<f64>,
    inputs: &[(&str, &Tensor<f64>)],
    output: &str,
    proj: &Tensor<f64>,
    pid: ParamId,
    mode: Mode,
) -> Result<Tensor<f64>> {
    let trace = graph.forward(inputs, &[output], mode)?;
    let mut grads = graph.new_param_grads();
    graph.backward(&trace, &[(output, proj)], &mut grads)?;
    Ok(grads
        .get(pid)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(graph.param_def(pid).shape)))
}

/// Same check for coordinates of one graph input.
pub fn check_input(
    graph: &Graph<f64>,
    inputs: &[(&str, &Tensor<f64>)],
    output: &str,
    proj: &Tensor<f64>,
    input: &str,
    coords: &[usize],
    mode: Mode,
) -> Result<f64> {
    let trace = graph.forward(inputs, &[output], mode)?;
    let mut grads = graph.new_param_grads();
    let input_grads = graph.backward(&trace, &[(output, proj)], &mut grads)?;
    let base = inputs
        .iter()
        .find(|(n, _)| *n == input)
        .map(|(_, t)| (*t).clone())
        .ok_or_else(|| Error::config(format!("input '{input}' not bound")))?;
    let analytic = input_grads
        .get(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(base.shape()));

    let all: Vec<usize>;
    let coords = if coords.is_empty() {
        all = (0..base.numel()).collect();
        &all
    } else {
        coords
    };

    let eval_with = |t: &Tensor<f64>| -> Result<f64> {
        let bound: Vec<(&str, &Tensor<f64>)> = inputs
            .iter()
            .map(|&(n, orig)| if n == input { (n, t) } else { (n, orig) })
            .collect();
        scalar_loss(graph, &bound, output, proj, mode)
    };

    let mut worst = 0.0f64;
    let mut perturbed = base.clone();
    for &i in coords {
        let x0 = base.data()[i];
        let h = 1e-5 * x0.abs().max(1.0);
        perturbed.data_mut()[i] = x0 + h;
        let up = eval_with(&perturbed)?;
        perturbed.data_mut()[i] = x0 - h;
        let down = eval_with(&perturbed)?;
        perturbed.data_mut()[i] = x0;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Checks every parameter of the graph, probing `per_param` spread
/// coordinates each (0 = all). Returns (name, max rel error) pairs.
pub fn check_all_params(
    graph: &mut Graph<f64>,
    inputs: &[(&str, &Tensor<f64>)],
    output: &str,
    proj: &Tensor<f64>,
    per_param: usize,
    mode: Mode,
) -> Result<Vec<(String, f64)>> {
    let names: Vec<String> = (0..graph.param_count())
        .map(|i| graph.param_def(ParamId(i)).name.clone())
        .collect();
    let mut report = Vec::with_capacity(names.len());
    for name in names {
        let pid = graph.param_id(&name).unwrap();
        let numel = graph.param_def(pid).shape.numel();
        let coords = if per_param == 0 {
            Vec::new()
        } else {
            spread_coords(numel, per_param)
        };
        let err = check_param(graph, inputs, output, proj, &name, &coords, mode)?;
        report.push((name, err));
    }
    Ok(report)
}
