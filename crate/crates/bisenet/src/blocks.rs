//! Architecture building blocks, composed from graph primitives.
//!
//! Parameter names are derived from the caller's prefix, so the same block
//! wired at the same place gets identical names (and therefore identical
//! seeded initial values) regardless of what else the graph contains.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::ops::{ConvSpec, PoolSpec};

/// conv(k, stride) + BN + ReLU, the default convolution unit.
pub fn conv_bn_relu<S: Scalar>(
    g: &mut Graph<S>,
    prefix: &str,
    x: NodeId,
    c_out: usize,
    k: usize,
    spec: ConvSpec,
) -> Result<NodeId> {
    let c = g.conv(&format!("{prefix}.conv"), x, c_out, k, spec, false)?;
    let b = g.batchnorm(&format!("{prefix}.bn"), c)?;
    g.relu(&format!("{prefix}.relu"), b)
}

/// conv(k, stride) + BN without activation.
pub fn conv_bn<S: Scalar>(
    g: &mut Graph<S>,
    prefix: &str,
    x: NodeId,
    c_out: usize,
    k: usize,
    spec: ConvSpec,
) -> Result<NodeId> {
    let c = g.conv(&format!("{prefix}.conv"), x, c_out, k, spec, false)?;
    g.batchnorm(&format!("{prefix}.bn"), c)
}

/// Depthwise 3x3 + BN (one filter per channel).
pub fn depthwise_bn<S: Scalar>(
    g: &mut Graph<S>,
    prefix: &str,
    x: NodeId,
    stride: usize,
) -> Result<NodeId> {
    let c = g.node_channels(x);
    let spec = ConvSpec { stride, pad: 1, groups: c };
    let d = g.conv(&format!("{prefix}.dw"), x, c, 3, spec, false)?;
    g.batchnorm(&format!("{prefix}.bn"), d)
}

/// Fast-downsampling stem: a strided entry convolution, then a convolution
/// path and a max-pool path whose concatenation is fused back to `c`
/// channels. Output is at 1/4 of the input resolution.
pub fn stem_block<S: Scalar>(
    g: &mut Graph<S>,
    prefix: &str,
    x: NodeId,
    c: usize,
) -> Result<NodeId> {
    if c % 2 != 0 {
        return Err(Error::config(format!(
            "stem width must be even to halve internally, got {c}"
        )));
    }
    let entry = conv_bn_relu(g, &format!("{prefix}.entry"), x, c, 3, ConvSpec::same(3, 2))?;
    let a0 = conv_bn_relu(g, &format!("{prefix}.left0"), entry, c / 2, 1, ConvSpec::same(1, 1))?;
    let a1 = conv_bn_relu(g, &format!("{prefix}.left1"), a0, c, 3, ConvSpec::same(3, 2))?;
    let b = g.maxpool(&format!("{prefix}.pool"), entry, PoolSpec::new(3, 2, 1))?;
    let cat = g.concat(&format!("{prefix}.cat"), &[a1, b])?;
    conv_bn_relu(g, &format!("{prefix}.fuse"), cat, c, 3, ConvSpec::same(3, 1))
}

/// Global-context embedding: GAP + BN, a 1x1 bottleneck, a broadcast
/// residual add, and a final plain 3x3 convolution.
pub fn context_embedding<S: Scalar>(g: &mut Graph<S>, prefix: &str, x: NodeId) -> Result<NodeId> {
    let c = g.node_channels(x);
    let gap = g.global_avgpool(&format!("{prefix}.gap"), x)?;
    let gn = g.batchnorm(&format!("{prefix}.gapbn"), gap)?;
    let squeeze = conv_bn_relu(g, &format!("{prefix}.point"), gn, c, 1, ConvSpec::same(1, 1))?;
    let fused = g.add_nodes(&format!("{prefix}.add"), x, squeeze)?;
    g.conv(&format!("{prefix}.out"), fused, c, 3, ConvSpec::same(3, 1), false)
}

/// Stride-1 gather-and-expansion layer: expand by `expansion` with a 3x3
/// convolution, depthwise 3x3, project back with a 1x1, residual, ReLU.
pub fn ge_layer_s1<S: Scalar>(
    g: &mut Graph<S>,
    prefix: &str,
    x: NodeId,
    expansion: usize,
) -> Result<NodeId> {
    if expansion == 0 {
        return Err(Error::config("expansion factor must be at least 1"));
    }
    let c = g.node_channels(x);
    let e = c * expansion;
    let wide = conv_bn_relu(g, &format!("{prefix}.gather"), x, e, 3, ConvSpec::same(3, 1))?;
    let dw = depthwise_bn(g, &format!("{prefix}.depth"), wide, 1)?;
    let proj = conv_bn(g, &format!("{prefix}.project"), dw, c, 1, ConvSpec::same(1, 1))?;
    let sum = g.add_nodes(&format!("{prefix}.add"), x, proj)?;
    g.relu(&format!("{prefix}.relu"), sum)
}

/// Stride-2 gather-and-expansion layer with a depthwise shortcut. The two
/// stacked depthwise 3x3 convolutions widen the main path's receptive
/// footprint to 9x9 over the layer input (the stride-1 variant sees 5x5).
pub fn ge_layer_s2<S: Scalar>(
    g: &mut Graph<S>,
    prefix: &str,
    x: NodeId,
    c_out: usize,
    expansion: usize,
) -> Result<NodeId> {
    if expansion == 0 {
        return Err(Error::config("expansion factor must be at least 1"));
    }
    let c_in = g.node_channels(x);
    let e = c_in * expansion;
    let wide = conv_bn_relu(g, &format!("{prefix}.gather"), x, e, 3, ConvSpec::same(3, 1))?;
    let dw1 = depthwise_bn(g, &format!("{prefix}.depth1"), wide, 2)?;
    let dw2 = depthwise_bn(g, &format!("{prefix}.depth2"), dw1, 1)?;
    let proj = conv_bn(g, &format!("{prefix}.project"), dw2, c_out, 1, ConvSpec::same(1, 1))?;
    let sc_dw = depthwise_bn(g, &format!("{prefix}.shortcut"), x, 2)?;
    let sc = conv_bn(g, &format!("{prefix}.scproject"), sc_dw, c_out, 1, ConvSpec::same(1, 1))?;
    let sum = g.add_nodes(&format!("{prefix}.add"), proj, sc)?;
    g.relu(&format!("{prefix}.relu"), sum)
}

/// Guided two-scale fusion of the detail output (1/8) and semantic output
/// (1/32). Each branch gates the other through a sigmoid at both scales;
/// the fused map stays at 1/8 resolution with the shared channel width.
pub fn guided_aggregation<S: Scalar>(
    g: &mut Graph<S>,
    prefix: &str,
    detail: NodeId,
    semantic: NodeId,
) -> Result<NodeId> {
    let c = g.node_channels(detail);
    if g.node_channels(semantic) != c {
        return Err(Error::config(format!(
            "aggregation needs equal widths, got detail {c} vs semantic {}",
            g.node_channels(semantic)
        )));
    }

    // Detail kept at 1/8: depthwise + 1x1.
    let d1_dw = depthwise_bn(g, &format!("{prefix}.d8"), detail, 1)?;
    let d1 = g.conv(&format!("{prefix}.d8.point"), d1_dw, c, 1, ConvSpec::same(1, 1), false)?;
    // Detail brought down to 1/32: strided conv + average pool.
    let d2_conv = conv_bn(g, &format!("{prefix}.d32"), detail, c, 3, ConvSpec::same(3, 2))?;
    let d2 = g.avgpool(&format!("{prefix}.d32.pool"), d2_conv, PoolSpec::new(3, 2, 1))?;

    // Semantic gate for the 1/8 scale: conv + BN, x4 upsample, sigmoid.
    let s1_conv = conv_bn(g, &format!("{prefix}.s8"), semantic, c, 3, ConvSpec::same(3, 1))?;
    let s1_up = g.upsample(&format!("{prefix}.s8.up"), s1_conv, 4)?;
    let s1 = g.sigmoid(&format!("{prefix}.s8.gate"), s1_up)?;
    // Semantic gate for the 1/32 scale: depthwise + 1x1, sigmoid.
    let s2_dw = depthwise_bn(g, &format!("{prefix}.s32"), semantic, 1)?;
    let s2_point =
        g.conv(&format!("{prefix}.s32.point"), s2_dw, c, 1, ConvSpec::same(1, 1), false)?;
    let s2 = g.sigmoid(&format!("{prefix}.s32.gate"), s2_point)?;

    let hi = g.mul_nodes(&format!("{prefix}.hi"), d1, s1)?;
    let lo = g.mul_nodes(&format!("{prefix}.lo"), d2, s2)?;
    let lo_up = g.upsample(&format!("{prefix}.lo.up"), lo, 4)?;
    let sum = g.add_nodes(&format!("{prefix}.sum"), hi, lo_up)?;
    conv_bn(g, &format!("{prefix}.out"), sum, c, 3, ConvSpec::same(3, 1))
}

/// Classifier head: 3x3 conv to `c_mid`, 1x1 (with bias) to `classes`
/// logits, then bilinear upsample back by `scale` (1 = none).
pub fn seg_head<S: Scalar>(
    g: &mut Graph<S>,
    prefix: &str,
    x: NodeId,
    c_mid: usize,
    classes: usize,
    scale: usize,
) -> Result<NodeId> {
    if classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {classes}")));
    }
    let mid = conv_bn_relu(g, &format!("{prefix}.mid"), x, c_mid, 3, ConvSpec::same(3, 1))?;
    let logits = g.conv(&format!("{prefix}.logits"), mid, classes, 1, ConvSpec::same(1, 1), true)?;
    if scale == 1 {
        Ok(logits)
    } else {
        g.upsample(&format!("{prefix}.up"), logits, scale)
    }
}
