//! Static-graph reverse-mode autodiff.
//!
//! A [`Graph`] is a topologically ordered list of nodes built once by the
//! model code, plus named parameter and buffer stores. Running it produces
//! a [`Trace`] holding every computed node value; [`Graph::backward`] walks
//! the trace in reverse and accumulates parameter gradients.
//!
//! Node gradients are scratch state local to one backward call, while
//! parameter gradients accumulate across calls. Multiple loss heads are
//! therefore seeded together in a single call, which propagates each
//! shared-trunk contribution exactly once.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::NormalSource;
use crate::scalar::Scalar;
use crate::tensor::ops::{
    add, add_backward, avgpool2d, avgpool2d_backward, batchnorm2d_eval,
    batchnorm2d_eval_backward, batchnorm2d_train, batchnorm2d_train_backward, concat_backward,
    concat_channels, conv2d, conv2d_backward, conv_out_dim, global_avgpool,
    global_avgpool_backward, maxpool2d, maxpool2d_backward, mul, mul_backward, relu,
    relu_backward, sigmoid, sigmoid_backward, update_running_stats, upsample_bilinear,
    upsample_bilinear_backward, BnBatchStats, ConvSpec, PoolSpec,
};
use crate::tensor::{Shape4, Tensor};

/// Epsilon added to the variance in every batch-norm layer.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum: running <- 0.9 * running + 0.1 * batch.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Running statistics; requires an initialized network.
    Eval,
    /// Batch statistics; updates running statistics.
    Train,
    /// Batch statistics without touching running statistics. This keeps
    /// repeated forward passes pure, which finite differencing requires.
    TrainFrozen,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with std = sqrt(2 / fan_in).
    KaimingNormal { fan_in: usize },
    Const(f64),
}

#[derive(Debug, Clone)]
pub struct ParamDef {
    pub name: String,
    pub shape: Shape4,
    pub init: Init,
    /// Whether weight decay applies (convolution kernels only).
    pub decay: bool,
}

#[derive(Debug, Clone)]
pub struct BufferDef {
    pub name: String,
    pub shape: Shape4,
    pub default: f64,
}

#[derive(Debug, Clone)]
pub enum NodeOp {
    Input,
    Conv { spec: ConvSpec, kernel: usize, weight: ParamId, bias: Option<ParamId> },
    BatchNorm { gamma: ParamId, beta: ParamId, mean: BufferId, var: BufferId },
    Relu,
    Sigmoid,
    MaxPool(PoolSpec),
    AvgPool(PoolSpec),
    GlobalAvgPool,
    Upsample { scale: usize },
    Add,
    Mul,
    Concat,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub name: String,
    pub op: NodeOp,
    pub inputs: Vec<NodeId>,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node>,
    /// Channel count of each node's output, known at build time.
    channels: Vec<usize>,
    inputs: Vec<(String, NodeId)>,
    outputs: Vec<(String, NodeId)>,
    param_defs: Vec<ParamDef>,
    params: Vec<Tensor<S>>,
    buffer_defs: Vec<BufferDef>,
    buffers: Vec<Tensor<S>>,
    names: HashMap<String, NodeId>,
    initialized: bool,
}

/// Values recorded by a forward pass. Indexed per node; nodes outside the
/// requested output set stay `None`.
#[derive(Debug)]
pub struct Trace<S: Scalar> {
    mode: Mode,
    values: Vec<Option<Tensor<S>>>,
    bn_stats: Vec<Option<BnBatchStats>>,
}

impl<S: Scalar> Trace<S> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.values[id.0].as_ref()
    }
}

/// Parameter gradients, parallel to the graph's parameter store.
pub struct ParamGrads<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> ParamGrads<S> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn accumulate(&mut self, id: ParamId, delta: Tensor<S>) {
        match &mut self.grads[id.0] {
            Some(g) => {
                debug_assert_eq!(g.shape(), delta.shape());
                for (a, &b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }
}

/// Gradients with respect to the graph inputs, keyed by input name.
pub type InputGrads<S> = HashMap<String, Tensor<S>>;

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            channels: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            param_defs: Vec::new(),
            params: Vec::new(),
            buffer_defs: Vec::new(),
            buffers: Vec::new(),
            names: HashMap::new(),
            initialized: false,
        }
    }

    // ---- construction -----------------------------------------------------

    fn push_node(&mut self, name: &str, op: NodeOp, inputs: Vec<NodeId>, c: usize) -> Result<NodeId> {
        if self.names.contains_key(name) {
            return Err(Error::config(format!("duplicate node name '{name}'")));
        }
        for id in &inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::config(format!("node '{name}' wires an unknown input")));
            }
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { name: name.to_string(), op, inputs });
        self.channels.push(c);
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    fn add_param(&mut self, name: String, shape: Shape4, init: Init, decay: bool) -> Result<ParamId> {
        if self.param_defs.iter().any(|p| p.name == name) {
            return Err(Error::config(format!("duplicate parameter name '{name}'")));
        }
        let id = ParamId(self.param_defs.len());
        self.param_defs.push(ParamDef { name, shape, init, decay });
        self.params.push(Tensor::zeros(shape));
        Ok(id)
    }

    fn add_buffer(&mut self, name: String, shape: Shape4, default: f64) -> Result<BufferId> {
        if self.buffer_defs.iter().any(|b| b.name == name) {
            return Err(Error::config(format!("duplicate buffer name '{name}'")));
        }
        let id = BufferId(self.buffer_defs.len());
        self.buffer_defs.push(BufferDef { name: name.clone(), shape, default });
        self.buffers.push(Tensor::filled(shape, S::from_f64(default)));
        Ok(id)
    }

    pub fn input(&mut self, name: &str, channels: usize) -> Result<NodeId> {
        let id = self.push_node(name, NodeOp::Input, vec![], channels)?;
        self.inputs.push((name.to_string(), id));
        Ok(id)
    }

    /// 2-D convolution. The kernel tensor is `{name}.w` with shape
    /// (c_out, c_in/groups, k, k); an optional bias is `{name}.b`.
    pub fn conv(
        &mut self,
        name: &str,
        x: NodeId,
        c_out: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Result<NodeId> {
        let c_in = self.channels[x.0];
        if c_in % spec.groups != 0 || c_out % spec.groups != 0 {
            return Err(Error::config(format!(
                "conv '{name}': groups {} must divide c_in {c_in} and c_out {c_out}",
                spec.groups
            )));
        }
        let w_shape = Shape4::new(c_out, c_in / spec.groups, kernel, kernel);
        let fan_in = (c_in / spec.groups) * kernel * kernel;
        let weight = self.add_param(
            format!("{name}.w"),
            w_shape,
            Init::KaimingNormal { fan_in },
            true,
        )?;
        let bias = if bias {
            Some(self.add_param(
                format!("{name}.b"),
                Shape4::new(1, c_out, 1, 1),
                Init::Const(0.0),
                false,
            )?)
        } else {
            None
        };
        self.push_node(name, NodeOp::Conv { spec, kernel, weight, bias }, vec![x], c_out)
    }

    pub fn batchnorm(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let c = self.channels[x.0];
        let shape = Shape4::new(1, c, 1, 1);
        let gamma = self.add_param(format!("{name}.gamma"), shape, Init::Const(1.0), false)?;
        let beta = self.add_param(format!("{name}.beta"), shape, Init::Const(0.0), false)?;
        let mean = self.add_buffer(format!("{name}.mean"), shape, 0.0)?;
        let var = self.add_buffer(format!("{name}.var"), shape, 1.0)?;
        self.push_node(name, NodeOp::BatchNorm { gamma, beta, mean, var }, vec![x], c)
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let c = self.channels[x.0];
        self.push_node(name, NodeOp::Relu, vec![x], c)
    }

    pub fn sigmoid(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let c = self.channels[x.0];
        self.push_node(name, NodeOp::Sigmoid, vec![x], c)
    }

    pub fn maxpool(&mut self, name: &str, x: NodeId, spec: PoolSpec) -> Result<NodeId> {
        let c = self.channels[x.0];
        self.push_node(name, NodeOp::MaxPool(spec), vec![x], c)
    }

    pub fn avgpool(&mut self, name: &str, x: NodeId, spec: PoolSpec) -> Result<NodeId> {
        let c = self.channels[x.0];
        self.push_node(name, NodeOp::AvgPool(spec), vec![x], c)
    }

    pub fn global_avgpool(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let c = self.channels[x.0];
        self.push_node(name, NodeOp::GlobalAvgPool, vec![x], c)
    }

    pub fn upsample(&mut self, name: &str, x: NodeId, scale: usize) -> Result<NodeId> {
        if !(2..=64).contains(&scale) || !scale.is_power_of_two() {
            return Err(Error::config(format!(
                "upsample '{name}': scale must be a power of two in [2, 64], got {scale}"
            )));
        }
        let c = self.channels[x.0];
        self.push_node(name, NodeOp::Upsample { scale }, vec![x], c)
    }

    pub fn add_nodes(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ca, cb) = (self.channels[a.0], self.channels[b.0]);
        if ca != cb {
            return Err(Error::config(format!(
                "add '{name}': channel mismatch {ca} vs {cb}"
            )));
        }
        self.push_node(name, NodeOp::Add, vec![a, b], ca)
    }

    pub fn mul_nodes(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ca, cb) = (self.channels[a.0], self.channels[b.0]);
        if ca != cb {
            return Err(Error::config(format!(
                "mul '{name}': channel mismatch {ca} vs {cb}"
            )));
        }
        self.push_node(name, NodeOp::Mul, vec![a, b], ca)
    }

    pub fn concat(&mut self, name: &str, xs: &[NodeId]) -> Result<NodeId> {
        let c: usize = xs.iter().map(|id| self.channels[id.0]).sum();
        self.push_node(name, NodeOp::Concat, xs.to_vec(), c)
    }

    pub fn mark_output(&mut self, name: &str, node: NodeId) -> Result<()> {
        if self.outputs.iter().any(|(n, _)| n == name) {
            return Err(Error::config(format!("duplicate output name '{name}'")));
        }
        self.outputs.push((name.to_string(), node));
        Ok(())
    }

    // ---- introspection ----------------------------------------------------

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_channels(&self, id: NodeId) -> usize {
        self.channels[id.0]
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    pub fn input_names(&self) -> Vec<&str> {
        self.inputs.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn output_names(&self) -> Vec<&str> {
        self.outputs.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn output_node(&self, name: &str) -> Option<NodeId> {
        self.outputs.iter().find(|(n, _)| n == name).map(|&(_, id)| id)
    }

    pub fn param_count(&self) -> usize {
        self.param_defs.len()
    }

    pub fn param_def(&self, id: ParamId) -> &ParamDef {
        &self.param_defs[id.0]
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.param_defs.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0]
    }

    pub fn set_param(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let want = self.param_defs[id.0].shape;
        if value.shape() != want {
            return Err(Error::config(format!(
                "parameter '{}' expects shape {want}, got {}",
                self.param_defs[id.0].name,
                value.shape()
            )));
        }
        self.params[id.0] = value;
        Ok(())
    }

    pub fn buffer_count(&self) -> usize {
        self.buffer_defs.len()
    }

    pub fn buffer_def(&self, id: BufferId) -> &BufferDef {
        &self.buffer_defs[id.0]
    }

    pub fn buffer_id(&self, name: &str) -> Option<BufferId> {
        self.buffer_defs.iter().position(|b| b.name == name).map(BufferId)
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<S> {
        &self.buffers[id.0]
    }

    pub fn set_buffer(&mut self, id: BufferId, value: Tensor<S>) -> Result<()> {
        let want = self.buffer_defs[id.0].shape;
        if value.shape() != want {
            return Err(Error::config(format!(
                "buffer '{}' expects shape {want}, got {}",
                self.buffer_defs[id.0].name,
                value.shape()
            )));
        }
        self.buffers[id.0] = value;
        Ok(())
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Marks the network usable after all params/buffers were set externally
    /// (checkpoint restore).
    pub fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    /// A stable, human-readable description of the topology and stores.
    /// Checkpoints hash this string to detect architecture mismatches.
    pub fn describe(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        for (node, &c) in self.nodes.iter().zip(&self.channels) {
            let ins: Vec<String> = node.inputs.iter().map(|i| i.0.to_string()).collect();
            let op = match &node.op {
                NodeOp::Input => "input".to_string(),
                NodeOp::Conv { spec, kernel, .. } => format!(
                    "conv k{kernel} s{} p{} g{}",
                    spec.stride, spec.pad, spec.groups
                ),
                NodeOp::BatchNorm { .. } => "bn".to_string(),
                NodeOp::Relu => "relu".to_string(),
                NodeOp::Sigmoid => "sigmoid".to_string(),
                NodeOp::MaxPool(p) => format!("maxpool k{} s{} p{}", p.kernel, p.stride, p.pad),
                NodeOp::AvgPool(p) => format!("avgpool k{} s{} p{}", p.kernel, p.stride, p.pad),
                NodeOp::GlobalAvgPool => "gap".to_string(),
                NodeOp::Upsample { scale } => format!("up x{scale}"),
                NodeOp::Add => "add".to_string(),
                NodeOp::Mul => "mul".to_string(),
                NodeOp::Concat => "concat".to_string(),
            };
            writeln!(s, "{} {} c{} <- [{}]", node.name, op, c, ins.join(",")).unwrap();
        }
        for p in &self.param_defs {
            writeln!(s, "param {} {}", p.name, p.shape).unwrap();
        }
        for b in &self.buffer_defs {
            writeln!(s, "buffer {} {}", b.name, b.shape).unwrap();
        }
        for (name, id) in &self.outputs {
            writeln!(s, "output {name} = {}", id.0).unwrap();
        }
        s
    }

    // ---- initialization ---------------------------------------------------

    /// Draws every parameter from its own (seed, name)-keyed stream, so a
    /// parameter's initial value does not depend on what else is in the
    /// graph. Buffers reset to their defaults.
    pub fn init_params(&mut self, seed: u64) {
        for (def, value) in self.param_defs.iter().zip(&mut self.params) {
            match def.init {
                Init::Const(c) => {
                    *value = Tensor::filled(def.shape, S::from_f64(c));
                }
                Init::KaimingNormal { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    let mut src = NormalSource::new(seed, &def.name);
                    let data = (0..def.shape.numel())
                        .map(|_| S::from_f64(src.next() * std))
                        .collect();
                    *value = Tensor::from_vec(def.shape, data).expect("init shape");
                }
            }
        }
        for (def, value) in self.buffer_defs.iter().zip(&mut self.buffers) {
            *value = Tensor::filled(def.shape, S::from_f64(def.default));
        }
        self.initialized = true;
    }

    // ---- forward ----------------------------------------------------------

    /// Marks every ancestor of the requested outputs.
    fn needed_set(&self, outputs: &[&str]) -> Result<Vec<bool>> {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack = Vec::new();
        for name in outputs {
            let id = self.output_node(name).ok_or_else(|| {
                Error::config(format!("unknown output '{name}'"))
            })?;
            stack.push(id);
        }
        while let Some(id) = stack.pop() {
            if !needed[id.0] {
                needed[id.0] = true;
                stack.extend(self.nodes[id.0].inputs.iter().copied());
            }
        }
        Ok(needed)
    }

    /// Runs the graph in [`Mode::Eval`] or [`Mode::TrainFrozen`].
    pub fn forward(
        &self,
        inputs: &[(&str, &Tensor<S>)],
        outputs: &[&str],
        mode: Mode,
    ) -> Result<Trace<S>> {
        if mode == Mode::Train {
            return Err(Error::state(
                "training mode updates running statistics; call forward_train",
            ));
        }
        let (trace, _) = self.forward_inner(inputs, outputs, mode)?;
        Ok(trace)
    }

    /// Runs the graph in [`Mode::Train`], updating BN running statistics.
    pub fn forward_train(
        &mut self,
        inputs: &[(&str, &Tensor<S>)],
        outputs: &[&str],
    ) -> Result<Trace<S>> {
        let (trace, updates) = self.forward_inner(inputs, outputs, Mode::Train)?;
        for (id, stats) in updates {
            let def_shape = self.buffer_defs[id.0].shape;
            debug_assert_eq!(self.buffer_defs[id.0 + 1].shape, def_shape);
            // Buffers are registered mean-then-var; update the pair.
            let (head, tail) = self.buffers.split_at_mut(id.0 + 1);
            update_running_stats(&mut head[id.0], &mut tail[0], &stats, BN_MOMENTUM);
        }
        Ok(trace)
    }

    #[allow(clippy::type_complexity)]
    fn forward_inner(
        &self,
        inputs: &[(&str, &Tensor<S>)],
        outputs: &[&str],
        mode: Mode,
    ) -> Result<(Trace<S>, Vec<(BufferId, BnBatchStats)>)> {
        if !self.initialized {
            return Err(Error::state(
                "network parameters are uninitialized; call init_params or load a checkpoint",
            ));
        }
        let needed = self.needed_set(outputs)?;
        let mut values: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        let mut bn_stats: Vec<Option<BnBatchStats>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut updates = Vec::new();

        // Bind inputs.
        let mut bound = vec![false; self.inputs.len()];
        for (name, tensor) in inputs {
            let pos = self
                .inputs
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::config(format!("unknown input '{name}'")))?;
            if bound[pos] {
                return Err(Error::config(format!("input '{name}' bound twice")));
            }
            bound[pos] = true;
            let id = self.inputs[pos].1;
            if tensor.shape().c != self.channels[id.0] {
                return Err(Error::config(format!(
                    "input '{name}' expects {} channels, got {}",
                    self.channels[id.0],
                    tensor.shape().c
                )));
            }
            values[id.0] = Some((*tensor).clone());
        }
        for (pos, (name, id)) in self.inputs.iter().enumerate() {
            if needed[id.0] && !bound[pos] {
                return Err(Error::config(format!("missing input '{name}'")));
            }
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if !needed[idx] || matches!(node.op, NodeOp::Input) {
                continue;
            }
            let arg = |k: usize| values[node.inputs[k].0].as_ref().expect("topo order");
            let out = match &node.op {
                NodeOp::Input => unreachable!(),
                NodeOp::Conv { spec, weight, bias, .. } => {
                    let b = bias.map(|id| &self.params[id.0]);
                    conv2d(arg(0), &self.params[weight.0], b, spec).map_err(|e| {
                        Error::config(format!("node '{}': {e}", node.name))
                    })?
                }
                NodeOp::BatchNorm { gamma, beta, mean, var } => {
                    let g = &self.params[gamma.0];
                    let b = &self.params[beta.0];
                    match mode {
                        Mode::Eval => batchnorm2d_eval(
                            arg(0),
                            g,
                            b,
                            &self.buffers[mean.0],
                            &self.buffers[var.0],
                            BN_EPS,
                        )?,
                        Mode::Train | Mode::TrainFrozen => {
                            let (y, stats) = batchnorm2d_train(arg(0), g, b, BN_EPS)?;
                            if mode == Mode::Train {
                                updates.push((*mean, stats.clone()));
                            }
                            bn_stats[idx] = Some(stats);
                            y
                        }
                    }
                }
                NodeOp::Relu => relu(arg(0)),
                NodeOp::Sigmoid => sigmoid(arg(0)),
                NodeOp::MaxPool(spec) => maxpool2d(arg(0), *spec)?,
                NodeOp::AvgPool(spec) => avgpool2d(arg(0), *spec)?,
                NodeOp::GlobalAvgPool => global_avgpool(arg(0)),
                NodeOp::Upsample { scale } => upsample_bilinear(arg(0), *scale)?,
                NodeOp::Add => add(arg(0), arg(1))?,
                NodeOp::Mul => mul(arg(0), arg(1))?,
                NodeOp::Concat => {
                    let xs: Vec<&Tensor<S>> =
                        node.inputs.iter().map(|i| values[i.0].as_ref().unwrap()).collect();
                    concat_channels(&xs)?
                }
            };
            values[idx] = Some(out);
        }

        Ok((Trace { mode, values, bn_stats }, updates))
    }

    // ---- backward ---------------------------------------------------------

    pub fn new_param_grads(&self) -> ParamGrads<S> {
        ParamGrads { grads: (0..self.params.len()).map(|_| None).collect() }
    }

    /// Back-propagates from the named outputs, each seeded with dL/d(output).
    /// Parameter gradients accumulate into `param_grads`; gradients with
    /// respect to the bound inputs are returned.
    pub fn backward(
        &self,
        trace: &Trace<S>,
        seeds: &[(&str, &Tensor<S>)],
        param_grads: &mut ParamGrads<S>,
    ) -> Result<InputGrads<S>> {
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        let acc = |slot: &mut Option<Tensor<S>>, delta: Tensor<S>| match slot {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            s => *s = Some(delta),
        };

        let mut top = 0usize;
        for (name, seed) in seeds {
            let id = self
                .output_node(name)
                .ok_or_else(|| Error::config(format!("unknown output '{name}'")))?;
            let value = trace.values[id.0].as_ref().ok_or_else(|| {
                Error::state(format!("output '{name}' was not evaluated in this trace"))
            })?;
            if value.shape() != seed.shape() {
                return Err(Error::config(format!(
                    "seed for '{name}' has shape {}, output is {}",
                    seed.shape(),
                    value.shape()
                )));
            }
            acc(&mut grads[id.0], (*seed).clone());
            top = top.max(id.0);
        }
        if seeds.is_empty() {
            return Err(Error::config("backward needs at least one seeded output"));
        }

        for idx in (0..=top).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, NodeOp::Input) {
                grads[idx] = Some(dy);
                continue;
            }
            let value_of = |id: NodeId| -> Result<&Tensor<S>> {
                trace.values[id.0].as_ref().ok_or_else(|| {
                    Error::state(format!(
                        "node '{}' has no recorded value; was it evaluated?",
                        self.nodes[id.0].name
                    ))
                })
            };
            match &node.op {
                NodeOp::Input => unreachable!(),
                NodeOp::Conv { spec, weight, bias, .. } => {
                    let x = value_of(node.inputs[0])?;
                    let (dx, dw, db) = conv2d_backward(x, &self.params[weight.0], spec, &dy)?;
                    acc(&mut grads[node.inputs[0].0], dx);
                    param_grads.accumulate(*weight, dw);
                    if let Some(b) = bias {
                        param_grads.accumulate(*b, db);
                    }
                }
                NodeOp::BatchNorm { gamma, beta, mean, var } => {
                    let x = value_of(node.inputs[0])?;
                    let g = &self.params[gamma.0];
                    let (dx, dgamma, dbeta) = match trace.mode {
                        Mode::Eval => batchnorm2d_eval_backward(
                            x,
                            g,
                            &self.buffers[mean.0],
                            &self.buffers[var.0],
                            BN_EPS,
                            &dy,
                        ),
                        Mode::Train | Mode::TrainFrozen => {
                            let stats = trace.bn_stats[idx].as_ref().ok_or_else(|| {
                                Error::state(format!(
                                    "node '{}' has no saved batch statistics",
                                    node.name
                                ))
                            })?;
                            batchnorm2d_train_backward(x, g, stats, BN_EPS, &dy)
                        }
                    };
                    acc(&mut grads[node.inputs[0].0], dx);
                    param_grads.accumulate(*gamma, dgamma);
                    param_grads.accumulate(*beta, dbeta);
                }
                NodeOp::Relu => {
                    let x = value_of(node.inputs[0])?;
                    acc(&mut grads[node.inputs[0].0], relu_backward(x, &dy));
                }
                NodeOp::Sigmoid => {
                    let y = value_of(NodeId(idx))?;
                    acc(&mut grads[node.inputs[0].0], sigmoid_backward(y, &dy));
                }
                NodeOp::MaxPool(spec) => {
                    let x = value_of(node.inputs[0])?;
                    acc(&mut grads[node.inputs[0].0], maxpool2d_backward(x, *spec, &dy)?);
                }
                NodeOp::AvgPool(spec) => {
                    let x = value_of(node.inputs[0])?;
                    acc(&mut grads[node.inputs[0].0], avgpool2d_backward(x.shape(), *spec, &dy)?);
                }
                NodeOp::GlobalAvgPool => {
                    let x = value_of(node.inputs[0])?;
                    acc(&mut grads[node.inputs[0].0], global_avgpool_backward(x.shape(), &dy));
                }
                NodeOp::Upsample { scale } => {
                    let x = value_of(node.inputs[0])?;
                    acc(
                        &mut grads[node.inputs[0].0],
                        upsample_bilinear_backward(x.shape(), *scale, &dy)?,
                    );
                }
                NodeOp::Add => {
                    let (a, b) = (value_of(node.inputs[0])?, value_of(node.inputs[1])?);
                    let (da, db) = add_backward(a.shape(), b.shape(), &dy)?;
                    acc(&mut grads[node.inputs[0].0], da);
                    acc(&mut grads[node.inputs[1].0], db);
                }
                NodeOp::Mul => {
                    let (a, b) = (value_of(node.inputs[0])?, value_of(node.inputs[1])?);
                    let (da, db) = mul_backward(a, b, &dy)?;
                    acc(&mut grads[node.inputs[0].0], da);
                    acc(&mut grads[node.inputs[1].0], db);
                }
                NodeOp::Concat => {
                    let shapes: Vec<Shape4> = node
                        .inputs
                        .iter()
                        .map(|i| value_of(*i).map(|t| t.shape()))
                        .collect::<Result<_>>()?;
                    for (i, dx) in node.inputs.iter().zip(concat_backward(&shapes, &dy)) {
                        acc(&mut grads[i.0], dx);
                    }
                }
            }
        }

        let mut input_grads = InputGrads::new();
        for (name, id) in &self.inputs {
            if let Some(g) = grads[id.0].take() {
                input_grads.insert(name.clone(), g);
            }
        }
        Ok(input_grads)
    }

    // ---- static shape inference --------------------------------------------

    /// Resolves every node's output shape from the input shapes without
    /// computing anything. The cost model runs on these shapes.
    pub fn resolve_shapes(&self, inputs: &[(&str, Shape4)]) -> Result<Vec<Option<Shape4>>> {
        let output_names: Vec<&str> = self.outputs.iter().map(|(n, _)| n.as_str()).collect();
        self.resolve_shapes_for(inputs, &output_names)
    }

    /// Same as [`Self::resolve_shapes`] but restricted to the ancestors of
    /// the named outputs; other nodes resolve to `None`.
    pub fn resolve_shapes_for(
        &self,
        inputs: &[(&str, Shape4)],
        outputs: &[&str],
    ) -> Result<Vec<Option<Shape4>>> {
        let needed = self.needed_set(outputs)?;
        let mut shapes: Vec<Option<Shape4>> = vec![None; self.nodes.len()];
        for (name, shape) in inputs {
            let id = self
                .inputs
                .iter()
                .find(|(n, _)| n == name)
                .map(|&(_, id)| id)
                .ok_or_else(|| Error::config(format!("unknown input '{name}'")))?;
            if shape.c != self.channels[id.0] {
                return Err(Error::config(format!(
                    "input '{name}' expects {} channels, got {}",
                    self.channels[id.0], shape.c
                )));
            }
            shapes[id.0] = Some(*shape);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if !needed[idx] || matches!(node.op, NodeOp::Input) {
                continue;
            }
            let arg = |k: usize| -> Result<Shape4> {
                shapes[node.inputs[k].0].ok_or_else(|| {
                    Error::config(format!("node '{}' depends on an unbound input", node.name))
                })
            };
            let out = match &node.op {
                NodeOp::Input => unreachable!(),
                NodeOp::Conv { spec, kernel, weight, .. } => {
                    let x = arg(0)?;
                    let w = self.param_defs[weight.0].shape;
                    let oh = conv_out_dim(x.h, *kernel, spec.stride, spec.pad)?;
                    let ow = conv_out_dim(x.w, *kernel, spec.stride, spec.pad)?;
                    Shape4::new(x.n, w.n, oh, ow)
                }
                NodeOp::BatchNorm { .. } | NodeOp::Relu | NodeOp::Sigmoid => arg(0)?,
                NodeOp::MaxPool(spec) | NodeOp::AvgPool(spec) => {
                    let x = arg(0)?;
                    let oh = conv_out_dim(x.h, spec.kernel, spec.stride, spec.pad)?;
                    let ow = conv_out_dim(x.w, spec.kernel, spec.stride, spec.pad)?;
                    Shape4::new(x.n, x.c, oh, ow)
                }
                NodeOp::GlobalAvgPool => {
                    let x = arg(0)?;
                    Shape4::new(x.n, x.c, 1, 1)
                }
                NodeOp::Upsample { scale } => {
                    let x = arg(0)?;
                    Shape4::new(x.n, x.c, x.h * scale, x.w * scale)
                }
                NodeOp::Add | NodeOp::Mul => {
                    let (a, b) = (arg(0)?, arg(1)?);
                    if a == b {
                        a
                    } else if b.h == 1 && b.w == 1 && a.n == b.n && a.c == b.c {
                        a
                    } else if a.h == 1 && a.w == 1 && a.n == b.n && a.c == b.c {
                        b
                    } else {
                        return Err(Error::config(format!(
                            "node '{}': incompatible shapes {a} and {b}",
                            node.name
                        )));
                    }
                }
                NodeOp::Concat => {
                    let first = arg(0)?;
                    let mut c = 0;
                    for k in 0..node.inputs.len() {
                        let s = arg(k)?;
                        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                            return Err(Error::config(format!(
                                "node '{}': concat inputs must share (n,h,w)",
                                node.name
                            )));
                        }
                        c += s.c;
                    }
                    Shape4::new(first.n, c, first.h, first.w)
                }
            };
            shapes[idx] = Some(out);
        }
        Ok(shapes)
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}
