//! Shared test oracles, written independently of the library kernels so
//! they can catch systematic errors: a direct straight-loop convolution,
//! an independent shape/cost walker, and small data helpers.

// Each integration-test binary compiles its own copy of this module and
// uses a different subset of it.
#![allow(dead_code)]

use bisenet::graph::{Graph, Node, NodeOp};
use bisenet::rng::NormalSource;
use bisenet::scalar::Scalar;
use bisenet::tensor::ops::ConvSpec;
use bisenet::tensor::{Shape4, Tensor};

/// Straight 7-loop convolution over padded input, accumulating in f64.
/// Deliberately structured differently from the library kernel (explicit
/// padded copy, no plane slicing) to serve as an independent reference.
pub fn naive_conv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<S> {
    let xs = x.shape();
    let ws = w.shape();
    let (c_out, cin_g, k) = (ws.n, ws.c, ws.h);
    assert_eq!(ws.h, ws.w, "square kernels only");
    assert_eq!(xs.c % groups, 0);
    assert_eq!(c_out % groups, 0);
    assert_eq!(cin_g, xs.c / groups);

    // Build an explicitly padded copy of the input.
    let (ph, pw) = (xs.h + 2 * pad, xs.w + 2 * pad);
    let mut padded = vec![0.0f64; xs.n * xs.c * ph * pw];
    for n in 0..xs.n {
        for c in 0..xs.c {
            for y in 0..xs.h {
                for xx in 0..xs.w {
                    padded[((n * xs.c + c) * ph + y + pad) * pw + xx + pad] =
                        x.get(n, c, y, xx).as_f64();
                }
            }
        }
    }
    let oh = (ph - k) / stride + 1;
    let ow = (pw - k) / stride + 1;
    let mut out = Tensor::<S>::zeros(Shape4::new(xs.n, c_out, oh, ow));
    let out_per_group = c_out / groups;
    for n in 0..xs.n {
        for co in 0..c_out {
            let g = co / out_per_group;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ci in 0..cin_g {
                        let c = g * cin_g + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy * stride + ky;
                                let ix = ox * stride + kx;
                                acc += padded[((n * xs.c + c) * ph + iy) * pw + ix]
                                    * w.get(co, ci, ky, kx).as_f64();
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b.get(0, co, 0, 0).as_f64();
                    }
                    out.set(n, co, oy, ox, S::from_f64(acc));
                }
            }
        }
    }
    out
}

pub fn random_tensor<S: Scalar>(seed: u64, name: &str, shape: Shape4) -> Tensor<S> {
    let mut src = NormalSource::new(seed, name);
    let mut t = Tensor::<S>::zeros(shape);
    for v in t.data_mut() {
        *v = S::from_f64(src.next());
    }
    t
}

/// One randomized convolution configuration for oracle comparisons.
pub struct ConvCase {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub h: usize,
    pub w: usize,
    pub bias: bool,
}

pub fn random_conv_case(seed: u64, idx: u64) -> ConvCase {
    use rand::Rng;
    let mut rng = bisenet::rng::stream_for(seed, &format!("conv.case.{idx}"));
    let k = [1usize, 3, 5][rng.gen_range(0..3)];
    let groups_mode = rng.gen_range(0..3);
    let (c_in, c_out, groups) = match groups_mode {
        0 => {
            let c_in = rng.gen_range(1..=4);
            (c_in, rng.gen_range(1..=6), 1)
        }
        1 => {
            // Depthwise: groups == channels.
            let c = rng.gen_range(2..=6);
            (c, c, c)
        }
        _ => {
            // Grouped: 2 groups.
            let per = rng.gen_range(1..=3);
            (2 * per, 2 * rng.gen_range(1..=3), 2)
        }
    };
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..=k / 2 + 1).min(k - 1 + 2);
    let min_dim = k.saturating_sub(2 * pad).max(1);
    ConvCase {
        n: rng.gen_range(1..=2),
        c_in,
        c_out,
        k,
        stride,
        pad,
        groups,
        h: rng.gen_range(min_dim..=min_dim + 7),
        w: rng.gen_range(min_dim..=min_dim + 7),
        bias: rng.gen::<bool>(),
    }
}

/// Runs `case` through the library kernel and the straight-loop reference;
/// returns the max absolute difference.
pub fn conv_case_diff<S: Scalar>(case: &ConvCase, seed: u64) -> f64 {
    let x = random_tensor::<S>(seed, "x", Shape4::new(case.n, case.c_in, case.h, case.w));
    let w = random_tensor::<S>(
        seed,
        "w",
        Shape4::new(case.c_out, case.c_in / case.groups, case.k, case.k),
    );
    let b = random_tensor::<S>(seed, "b", Shape4::new(1, case.c_out, 1, 1));
    let bias = case.bias.then_some(&b);
    let spec = ConvSpec { stride: case.stride, pad: case.pad, groups: case.groups };
    let got = bisenet::tensor::ops::conv2d(&x, &w, bias, &spec).expect("conv2d");
    let want = naive_conv2d(&x, &w, bias, case.stride, case.pad, case.groups);
    assert_eq!(got.shape(), want.shape());
    got.max_abs_diff(&want).map(|(d, _)| d).unwrap_or(0.0)
}

/// Independent double-entry cost walker. Re-derives every node's output
/// shape and cost from scratch (its own formulas, its own shape
/// propagation) given only the graph topology and the input shape, then
/// returns (macs, flops, params) totals for nodes feeding the outputs.
pub fn oracle_costs<S: Scalar>(
    graph: &Graph<S>,
    input_shape: Shape4,
    outputs: &[&str],
    flops_per_mac: u64,
) -> (u64, u64, u64) {
    let nodes: &[Node] = graph.nodes();
    // Mark ancestors of the requested outputs.
    let mut needed = vec![false; nodes.len()];
    let mut stack: Vec<usize> = outputs
        .iter()
        .map(|o| graph.output_node(o).expect("output exists").0)
        .collect();
    while let Some(i) = stack.pop() {
        if needed[i] {
            continue;
        }
        needed[i] = true;
        for dep in &nodes[i].inputs {
            stack.push(dep.0);
        }
    }

    let mut shapes: Vec<Option<Shape4>> = vec![None; nodes.len()];
    let (mut macs, mut flops, mut params) = (0u64, 0u64, 0u64);
    for (i, node) in nodes.iter().enumerate() {
        if !needed[i] {
            continue;
        }
        let in_shapes: Vec<Shape4> = node
            .inputs
            .iter()
            .map(|d| shapes[d.0].expect("topological order"))
            .collect();
        let numel =
            |s: Shape4| -> u64 { (s.n * s.c * s.h * s.w) as u64 };
        let out_shape;
        match &node.op {
            NodeOp::Input => {
                out_shape = input_shape;
            }
            NodeOp::Conv { spec, kernel, weight, bias } => {
                let x = in_shapes[0];
                let ConvSpec { stride, pad, groups } = *spec;
                let w_def = graph.param_def(*weight);
                let c_out = w_def.shape.n;
                let oh = (x.h + 2 * pad - kernel) / stride + 1;
                let ow = (x.w + 2 * pad - kernel) / stride + 1;
                out_shape = Shape4::new(x.n, c_out, oh, ow);
                let m = (kernel * kernel) as u64 * (x.c / groups) as u64 * numel(out_shape);
                macs += m;
                let mut f = m * flops_per_mac;
                params += w_def.shape.numel() as u64;
                if let Some(b) = bias {
                    params += graph.param_def(*b).shape.numel() as u64;
                    f += numel(out_shape);
                }
                flops += f;
            }
            NodeOp::BatchNorm { gamma, beta, .. } => {
                out_shape = in_shapes[0];
                flops += 2 * numel(out_shape);
                params += graph.param_def(*gamma).shape.numel() as u64
                    + graph.param_def(*beta).shape.numel() as u64;
            }
            NodeOp::Relu => {
                out_shape = in_shapes[0];
                flops += numel(out_shape);
            }
            NodeOp::Sigmoid => {
                out_shape = in_shapes[0];
                flops += 4 * numel(out_shape);
            }
            NodeOp::MaxPool(p) => {
                let x = in_shapes[0];
                let oh = (x.h + 2 * p.pad - p.kernel) / p.stride + 1;
                let ow = (x.w + 2 * p.pad - p.kernel) / p.stride + 1;
                out_shape = Shape4::new(x.n, x.c, oh, ow);
                flops += (p.kernel * p.kernel - 1) as u64 * numel(out_shape);
            }
            NodeOp::AvgPool(p) => {
                let x = in_shapes[0];
                let oh = (x.h + 2 * p.pad - p.kernel) / p.stride + 1;
                let ow = (x.w + 2 * p.pad - p.kernel) / p.stride + 1;
                out_shape = Shape4::new(x.n, x.c, oh, ow);
                flops += (p.kernel * p.kernel) as u64 * numel(out_shape);
            }
            NodeOp::GlobalAvgPool => {
                let x = in_shapes[0];
                out_shape = Shape4::new(x.n, x.c, 1, 1);
                flops += numel(x) + x.c as u64;
            }
            NodeOp::Upsample { scale } => {
                let x = in_shapes[0];
                out_shape = Shape4::new(x.n, x.c, x.h * scale, x.w * scale);
                flops += 7 * numel(out_shape);
            }
            NodeOp::Add | NodeOp::Mul => {
                // Output takes the larger spatial extent (broadcast).
                let (a, b) = (in_shapes[0], in_shapes[1]);
                out_shape = if a.h * a.w >= b.h * b.w { a } else { b };
                flops += numel(out_shape);
            }
            NodeOp::Concat => {
                let c: usize = in_shapes.iter().map(|s| s.c).sum();
                out_shape = Shape4::new(in_shapes[0].n, c, in_shapes[0].h, in_shapes[0].w);
            }
        }
        shapes[i] = Some(out_shape);
    }
    (macs, flops, params)
}
