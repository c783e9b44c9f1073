//! Static complexity analysis: parameter and FLOP counts per layer,
//! plus the width/depth ablation tables with published reference figures
//! for the original architecture alongside this implementation's numbers.
//!
//! Costs are computed from statically resolved shapes, never by running
//! the network. Only ancestors of the requested outputs are counted, so
//! auxiliary training heads never contribute to inference cost.

use crate::error::Result;
use crate::graph::{Graph, Node, NodeOp, ParamId};
use crate::model::{build_model, ArchConfig, AggMode, Variant, OUTPUT_MAIN};
use crate::scalar::Scalar;
use crate::tensor::Shape4;

/// How to convert multiply-accumulates into FLOPs. Elementwise terms are
/// identical under both conventions, so switching adds exactly the MAC
/// total once more.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convention {
    OneMacOneFlop,
    OneMacTwoFlops,
}

impl Convention {
    fn factor(self) -> u64 {
        match self {
            Convention::OneMacOneFlop => 1,
            Convention::OneMacTwoFlops => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerCost {
    pub name: String,
    /// Top-level component this layer belongs to (prefix before '.').
    pub section: String,
    pub op: String,
    pub out_shape: Shape4,
    pub macs: u64,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_macs: u64,
    pub total_flops: u64,
    pub total_params: u64,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }

    pub fn section_flops(&self, section: &str) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.section == section)
            .map(|l| l.flops)
            .sum()
    }
}

fn node_params<S: Scalar>(graph: &Graph<S>, node: &Node) -> u64 {
    let mut ids: Vec<ParamId> = Vec::new();
    match &node.op {
        NodeOp::Conv { weight, bias, .. } => {
            ids.push(*weight);
            if let Some(b) = bias {
                ids.push(*b);
            }
        }
        NodeOp::BatchNorm { gamma, beta, .. } => {
            ids.push(*gamma);
            ids.push(*beta);
        }
        _ => {}
    }
    ids.iter().map(|&id| graph.param_def(id).shape.numel() as u64).sum()
}

/// Costs for the sub-graph feeding the given outputs at the given input
/// size (batch 1 unless the shape says otherwise).
pub fn count_costs<S: Scalar>(
    graph: &Graph<S>,
    input_shape: Shape4,
    outputs: &[&str],
    convention: Convention,
) -> Result<CostReport> {
    let shapes = graph.resolve_shapes_for(&[("input", input_shape)], outputs)?;
    let f = convention.factor();
    let mut layers = Vec::new();
    for (node, maybe_shape) in graph.nodes().iter().zip(&shapes) {
        let Some(out) = *maybe_shape else { continue };
        let out_numel = out.numel() as u64;
        let (op, macs, flops) = match &node.op {
            NodeOp::Input => ("input".to_string(), 0, 0),
            NodeOp::Conv { spec, kernel, weight, bias } => {
                let w = graph.param_def(*weight).shape;
                // (k^2 * c_in/groups) MACs per output element.
                let macs = (kernel * kernel) as u64
                    * w.c as u64
                    * out_numel;
                let bias_terms = if bias.is_some() { out_numel } else { 0 };
                (
                    format!("conv k{kernel} s{} g{}", spec.stride, spec.groups),
                    macs,
                    macs * f + bias_terms,
                )
            }
            NodeOp::BatchNorm { .. } => ("bn".to_string(), 0, 2 * out_numel),
            NodeOp::Relu => ("relu".to_string(), 0, out_numel),
            NodeOp::Sigmoid => ("sigmoid".to_string(), 0, 4 * out_numel),
            NodeOp::MaxPool(p) => (
                format!("maxpool k{}", p.kernel),
                0,
                (p.kernel * p.kernel - 1) as u64 * out_numel,
            ),
            NodeOp::AvgPool(p) => (
                format!("avgpool k{}", p.kernel),
                0,
                (p.kernel * p.kernel) as u64 * out_numel,
            ),
            NodeOp::GlobalAvgPool => {
                let in_shape = shapes[node.inputs[0].0].expect("resolved input");
                ("gap".to_string(), 0, in_shape.numel() as u64 + out.c as u64)
            }
            NodeOp::Upsample { scale } => (format!("up x{scale}"), 0, 7 * out_numel),
            NodeOp::Add => ("add".to_string(), 0, out_numel),
            NodeOp::Mul => ("mul".to_string(), 0, out_numel),
            NodeOp::Concat => ("concat".to_string(), 0, 0),
        };
        layers.push(LayerCost {
            name: node.name.clone(),
            section: node.name.split('.').next().unwrap_or("").to_string(),
            op,
            out_shape: out,
            macs,
            flops,
            params: node_params(graph, node),
        });
    }
    let total_macs = layers.iter().map(|l| l.macs).sum();
    let total_flops = layers.iter().map(|l| l.flops).sum();
    let total_params = layers.iter().map(|l| l.params).sum();
    Ok(CostReport { layers, total_macs, total_flops, total_params })
}

pub fn report_to_text(report: &CostReport) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    writeln!(
        s,
        "{:<28} {:<16} {:>16} {:>14} {:>12} {:>10}",
        "layer", "op", "output", "macs", "flops", "params"
    )
    .unwrap();
    for l in &report.layers {
        writeln!(
            s,
            "{:<28} {:<16} {:>16} {:>14} {:>12} {:>10}",
            l.name,
            l.op,
            format!("{}", l.out_shape),
            l.macs,
            l.flops,
            l.params
        )
        .unwrap();
    }
    writeln!(
        s,
        "total: {:.4} GMACs, {:.4} GFLOPs, {} params ({:.3} M)",
        report.total_macs as f64 / 1e9,
        report.gflops(),
        report.total_params,
        report.total_params as f64 / 1e6
    )
    .unwrap();
    s
}

pub fn report_to_csv(report: &CostReport) -> String {
    use std::fmt::Write;
    let mut s = String::from("layer,section,op,out_n,out_c,out_h,out_w,macs,flops,params\n");
    for l in &report.layers {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            l.name,
            l.section,
            l.op,
            l.out_shape.n,
            l.out_shape.c,
            l.out_shape.h,
            l.out_shape.w,
            l.macs,
            l.flops,
            l.params
        )
        .unwrap();
    }
    s
}

// ---- ablation tables -------------------------------------------------------

/// Published complexity figures (GFLOPs at 512x1024 input) for the original
/// architecture, used as the reference column of each ablation table.
mod reference {
    pub const DETAIL_ONLY: f64 = 15.26;
    pub const SEMANTIC_ONLY: f64 = 7.63;
    pub const AGG_SUM: f64 = 20.77;
    pub const AGG_CONCAT: f64 = 21.98;
    pub const AGG_BGA: f64 = 21.15;
    /// lambda in {1/2, 1/4, 1/8, 1/16}.
    pub const LAMBDA: [(u32, u32, f64); 4] =
        [(1, 2, 25.84), (1, 4, 21.15), (1, 8, 19.93), (1, 16, 19.61)];
    pub const EXPANSION: [(usize, f64); 5] =
        [(1, 17.78), (2, 18.45), (4, 19.80), (6, 21.15), (8, 22.49)];
    pub const ALPHA: [(f64, f64); 5] =
        [(1.0, 21.15), (1.25, 34.98), (1.5, 49.46), (1.75, 66.45), (2.0, 85.94)];
    pub const DEPTH: [(usize, f64); 4] = [(1, 21.15), (2, 25.26), (3, 29.38), (4, 33.50)];
}

#[derive(Debug, Clone)]
pub struct TableRow {
    pub label: String,
    pub model_gflops: f64,
    pub reference_gflops: f64,
    pub params: u64,
}

#[derive(Debug, Clone)]
pub struct TablesReport {
    pub aggregation: Vec<TableRow>,
    pub lambda: Vec<TableRow>,
    pub expansion: Vec<TableRow>,
    pub alpha: Vec<TableRow>,
    pub depth: Vec<TableRow>,
}

/// Inference-path GFLOPs and parameter count for one configuration.
pub fn inference_cost(cfg: &ArchConfig, variant: Variant, convention: Convention) -> Result<CostReport> {
    let graph = build_model::<f32>(cfg, variant)?;
    let (h, w) = cfg.input_hw;
    count_costs(&graph, Shape4::new(1, 3, h, w), &[OUTPUT_MAIN], convention)
}

/// Builds every ablation configuration and collects its inference cost next
/// to the published reference number.
pub fn reproduce_tables(convention: Convention) -> Result<TablesReport> {
    let base = ArchConfig::default();
    let row = |label: &str, cfg: &ArchConfig, variant: Variant, reference: f64| -> Result<TableRow> {
        let report = inference_cost(cfg, variant, convention)?;
        Ok(TableRow {
            label: label.to_string(),
            model_gflops: report.gflops(),
            reference_gflops: reference,
            params: report.total_params,
        })
    };

    let mut aggregation = vec![
        row("detail-only", &base, Variant::DetailOnly, reference::DETAIL_ONLY)?,
        row("semantic-only", &base, Variant::SemanticOnly, reference::SEMANTIC_ONLY)?,
    ];
    for (mode, reference) in [
        (AggMode::Sum, reference::AGG_SUM),
        (AggMode::Concat, reference::AGG_CONCAT),
        (AggMode::Bga, reference::AGG_BGA),
    ] {
        let cfg = ArchConfig { agg: mode, ..base.clone() };
        aggregation.push(row(mode.name(), &cfg, Variant::Full, reference)?);
    }

    let mut lambda = Vec::new();
    for (num, den, reference) in reference::LAMBDA {
        let cfg = ArchConfig { lambda_num: num, lambda_den: den, ..base.clone() };
        lambda.push(row(&format!("lambda={num}/{den}"), &cfg, Variant::Full, reference)?);
    }

    let mut expansion = Vec::new();
    for (e, reference) in reference::EXPANSION {
        let cfg = ArchConfig { expansion: e, ..base.clone() };
        expansion.push(row(&format!("epsilon={e}"), &cfg, Variant::Full, reference)?);
    }

    let mut alpha = Vec::new();
    for (a, reference) in reference::ALPHA {
        let cfg = ArchConfig { alpha: a, ..base.clone() };
        alpha.push(row(&format!("alpha={a}"), &cfg, Variant::Full, reference)?);
    }

    let mut depth = Vec::new();
    for (d, reference) in reference::DEPTH {
        let cfg = ArchConfig { depth: d, ..base.clone() };
        depth.push(row(&format!("d={d}"), &cfg, Variant::Full, reference)?);
    }

    Ok(TablesReport { aggregation, lambda, expansion, alpha, depth })
}

fn table_to_text(title: &str, rows: &[TableRow], out: &mut String) {
    use std::fmt::Write;
    writeln!(out, "{title}").unwrap();
    writeln!(
        out,
        "  {:<16} {:>14} {:>18} {:>12}",
        "config", "model GFLOPs", "reference GFLOPs", "params (M)"
    )
    .unwrap();
    for r in rows {
        writeln!(
            out,
            "  {:<16} {:>14.2} {:>18.2} {:>12.3}",
            r.label,
            r.model_gflops,
            r.reference_gflops,
            r.params as f64 / 1e6
        )
        .unwrap();
    }
}

pub fn tables_to_text(tables: &TablesReport) -> String {
    let mut s = String::new();
    table_to_text("aggregation variants", &tables.aggregation, &mut s);
    table_to_text("semantic thinning (lambda)", &tables.lambda, &mut s);
    table_to_text("bottleneck expansion (epsilon)", &tables.expansion, &mut s);
    table_to_text("width multiplier (alpha)", &tables.alpha, &mut s);
    table_to_text("stage depth (d)", &tables.depth, &mut s);
    s
}

pub fn tables_to_csv(tables: &TablesReport) -> String {
    use std::fmt::Write;
    let mut s = String::from("table,config,gflops_model,gflops_ref,params\n");
    for (table, rows) in [
        ("aggregation", &tables.aggregation),
        ("lambda", &tables.lambda),
        ("expansion", &tables.expansion),
        ("alpha", &tables.alpha),
        ("depth", &tables.depth),
    ] {
        for r in rows {
            writeln!(
                s,
                "{},{},{:.6},{:.2},{}",
                table, r.label, r.model_gflops, r.reference_gflops, r.params
            )
            .unwrap();
        }
    }
    s
}
