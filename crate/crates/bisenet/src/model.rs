//! Full-model assembly: two branches, an aggregation stage, the main
//! classifier head, and optional auxiliary training heads.
//!
//! The architecture hyper-parameters: `lambda` thins the early semantic
//! stages relative to the detail widths, `expansion` widens the
//! gather-and-expansion bottlenecks, `alpha` scales every channel width,
//! and `depth` repeats the stride-1 layers inside each semantic stage.

use crate::blocks::{
    context_embedding, conv_bn_relu, depthwise_bn, ge_layer_s1, ge_layer_s2, guided_aggregation,
    seg_head, stem_block,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, NodeId};
use crate::labels::{argmax_channels, LabelMap};
use crate::scalar::Scalar;
use crate::tensor::ops::{resize_bilinear, ConvSpec};
use crate::tensor::Tensor;

pub const OUTPUT_MAIN: &str = "logits.main";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggMode {
    Sum,
    Concat,
    Bga,
}

impl AggMode {
    pub fn name(self) -> &'static str {
        match self {
            AggMode::Sum => "sum",
            AggMode::Concat => "concat",
            AggMode::Bga => "bga",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(AggMode::Sum),
            "concat" => Ok(AggMode::Concat),
            "bga" => Ok(AggMode::Bga),
            other => Err(Error::config(format!(
                "unknown aggregation '{other}' (expected sum, concat, or bga)"
            ))),
        }
    }
}

/// Tap points where auxiliary supervision heads can attach.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoosterPos {
    /// Semantic stem output, 1/4 resolution.
    Stage2,
    /// Semantic stage-3 output, 1/8.
    Stage3,
    /// Semantic stage-4 output, 1/16.
    Stage4,
    /// Semantic stage-5 output before context embedding, 1/32.
    Stage5_4,
    /// Semantic stage-5 output after context embedding, 1/32.
    Stage5_5,
}

pub const ALL_BOOSTERS: [BoosterPos; 5] = [
    BoosterPos::Stage2,
    BoosterPos::Stage3,
    BoosterPos::Stage4,
    BoosterPos::Stage5_4,
    BoosterPos::Stage5_5,
];

impl BoosterPos {
    pub fn name(self) -> &'static str {
        match self {
            BoosterPos::Stage2 => "stage2",
            BoosterPos::Stage3 => "stage3",
            BoosterPos::Stage4 => "stage4",
            BoosterPos::Stage5_4 => "stage5_4",
            BoosterPos::Stage5_5 => "stage5_5",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ALL_BOOSTERS
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown booster position '{s}'")))
    }

    /// Upsample factor from the tap back to full resolution.
    pub fn scale(self) -> usize {
        match self {
            BoosterPos::Stage2 => 4,
            BoosterPos::Stage3 => 8,
            BoosterPos::Stage4 => 16,
            BoosterPos::Stage5_4 | BoosterPos::Stage5_5 => 32,
        }
    }

    pub fn output_name(self) -> String {
        format!("logits.aux.{}", self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub classes: usize,
    /// Semantic thinning factor as an exact fraction (num / den).
    pub lambda_num: u32,
    pub lambda_den: u32,
    /// Bottleneck expansion inside gather-and-expansion layers.
    pub expansion: usize,
    /// Global width multiplier.
    pub alpha: f64,
    /// Repeat count for stride-1 layers in each semantic stage.
    pub depth: usize,
    pub agg: AggMode,
    pub boosters: Vec<BoosterPos>,
    /// Main-head hidden width before alpha scaling.
    pub head_width: usize,
    /// Auxiliary-head hidden width as a multiple of the tap's channels.
    pub aux_width_factor: usize,
    /// Network input size (h, w); both divisible by 32 (the deepest stride).
    pub input_hw: (usize, usize),
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            classes: 19,
            lambda_num: 1,
            lambda_den: 4,
            expansion: 6,
            alpha: 1.0,
            depth: 1,
            agg: AggMode::Bga,
            boosters: vec![
                BoosterPos::Stage2,
                BoosterPos::Stage3,
                BoosterPos::Stage4,
                BoosterPos::Stage5_4,
            ],
            head_width: 1024,
            aux_width_factor: 4,
            input_hw: (512, 1024),
        }
    }
}

/// Channel widths once lambda/alpha scaling and rounding are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Widths {
    pub detail: [usize; 3],
    pub stem: usize,
    pub s3: usize,
    pub s4: usize,
    pub s5: usize,
    pub head: usize,
}

/// Nearest multiple of `m`, never below `m`.
fn round_to(x: f64, m: usize) -> usize {
    (((x / m as f64).round() as usize) * m).max(m)
}

impl ArchConfig {
    /// Scaled-down variant for the synthetic demo task: quarter widths, a
    /// narrow head, 3 classes, 64x64 input.
    pub fn toy() -> Self {
        ArchConfig {
            classes: 3,
            alpha: 0.25,
            head_width: 64,
            input_hw: (64, 64),
            ..ArchConfig::default()
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda_num as f64 / self.lambda_den as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.lambda_num == 0 || self.lambda_den == 0 || self.lambda_num > self.lambda_den {
            return Err(Error::config(format!(
                "lambda must be a fraction in (0, 1], got {}/{}",
                self.lambda_num, self.lambda_den
            )));
        }
        if self.expansion == 0 {
            return Err(Error::config("expansion must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 8.0) {
            return Err(Error::config(format!(
                "alpha must be in (0, 8], got {}",
                self.alpha
            )));
        }
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        if self.head_width < 8 {
            return Err(Error::config("head width must be at least 8"));
        }
        if self.aux_width_factor == 0 {
            return Err(Error::config("aux width factor must be at least 1"));
        }
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::config(format!(
                "input size must be positive and divisible by 32, got {h}x{w}"
            )));
        }
        let mut seen = Vec::new();
        for b in &self.boosters {
            if seen.contains(b) {
                return Err(Error::config(format!(
                    "booster position '{}' listed twice",
                    b.name()
                )));
            }
            seen.push(*b);
        }
        Ok(())
    }

    /// Detail widths and the head width round to multiples of 8; the thin
    /// semantic stem rounds to a multiple of 4 so small lambdas stay
    /// representable.
    pub fn widths(&self) -> Widths {
        let a = self.alpha;
        let l = self.lambda();
        Widths {
            detail: [round_to(a * 64.0, 8), round_to(a * 64.0, 8), round_to(a * 128.0, 8)],
            stem: round_to(l * a * 64.0, 4),
            s3: round_to(l * a * 128.0, 8),
            s4: round_to(a * 64.0, 8),
            s5: round_to(a * 128.0, 8),
            head: round_to(a * self.head_width as f64, 8),
        }
    }
}

/// Which part of the architecture to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// Detail branch + main head only.
    DetailOnly,
    /// Semantic branch + main head only.
    SemanticOnly,
}

/// Semantic-branch tap points, for wiring boosters.
struct SemanticTaps {
    stem: NodeId,
    s3: NodeId,
    s4: NodeId,
    s5_pre: NodeId,
    s5_post: NodeId,
}

fn build_detail_branch<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    widths: &Widths,
) -> Result<NodeId> {
    let [c1, c2, c3] = widths.detail;
    let mut cur = conv_bn_relu(g, "detail.s1.conv0", x, c1, 3, ConvSpec::same(3, 2))?;
    cur = conv_bn_relu(g, "detail.s1.conv1", cur, c1, 3, ConvSpec::same(3, 1))?;
    cur = conv_bn_relu(g, "detail.s2.conv0", cur, c2, 3, ConvSpec::same(3, 2))?;
    cur = conv_bn_relu(g, "detail.s2.conv1", cur, c2, 3, ConvSpec::same(3, 1))?;
    cur = conv_bn_relu(g, "detail.s2.conv2", cur, c2, 3, ConvSpec::same(3, 1))?;
    cur = conv_bn_relu(g, "detail.s3.conv0", cur, c3, 3, ConvSpec::same(3, 2))?;
    cur = conv_bn_relu(g, "detail.s3.conv1", cur, c3, 3, ConvSpec::same(3, 1))?;
    conv_bn_relu(g, "detail.s3.conv2", cur, c3, 3, ConvSpec::same(3, 1))
}

fn build_semantic_branch<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    cfg: &ArchConfig,
    widths: &Widths,
) -> Result<SemanticTaps> {
    let stem = stem_block(g, "semantic.stem", x, widths.stem)?;

    let stage = |g: &mut Graph<S>, name: &str, input: NodeId, c_out: usize, repeats: usize| -> Result<NodeId> {
        let mut cur = ge_layer_s2(g, &format!("semantic.{name}.down"), input, c_out, cfg.expansion)?;
        for i in 0..repeats {
            cur = ge_layer_s1(g, &format!("semantic.{name}.ge{i}"), cur, cfg.expansion)?;
        }
        Ok(cur)
    };

    let s3 = stage(g, "s3", stem, widths.s3, cfg.depth)?;
    let s4 = stage(g, "s4", s3, widths.s4, cfg.depth)?;
    let s5_pre = stage(g, "s5", s4, widths.s5, 3 * cfg.depth)?;
    let s5_post = context_embedding(g, "semantic.ce", s5_pre)?;
    Ok(SemanticTaps { stem, s3, s4, s5_pre, s5_post })
}

/// Depthwise 3x3 + pointwise projection used by the sum/concat baselines.
fn separable_proj<S: Scalar>(
    g: &mut Graph<S>,
    prefix: &str,
    x: NodeId,
    c_out: usize,
) -> Result<NodeId> {
    let d = depthwise_bn(g, &format!("{prefix}.sep"), x, 1)?;
    conv_bn_relu(g, &format!("{prefix}.point"), d, c_out, 1, ConvSpec::same(1, 1))
}

/// Builds the requested variant. The main head output is [`OUTPUT_MAIN`];
/// each booster adds a `logits.aux.*` output (training-time only paths).
pub fn build_model<S: Scalar>(cfg: &ArchConfig, variant: Variant) -> Result<Graph<S>> {
    cfg.validate()?;
    let widths = cfg.widths();
    let mut g = Graph::new();
    let x = g.input("input", 3)?;

    let (trunk_out, head_scale) = match variant {
        Variant::DetailOnly => {
            let d = build_detail_branch(&mut g, x, &widths)?;
            (d, 8)
        }
        Variant::SemanticOnly => {
            let taps = build_semantic_branch(&mut g, x, cfg, &widths)?;
            (taps.s5_post, 32)
        }
        Variant::Full => {
            let detail = build_detail_branch(&mut g, x, &widths)?;
            let taps = build_semantic_branch(&mut g, x, cfg, &widths)?;
            let c3 = widths.detail[2];
            let merged = match cfg.agg {
                AggMode::Bga => {
                    if widths.s5 != c3 {
                        return Err(Error::config(format!(
                            "guided aggregation needs matching widths, got {} vs {c3}",
                            widths.s5
                        )));
                    }
                    guided_aggregation(&mut g, "agg", detail, taps.s5_post)?
                }
                AggMode::Sum | AggMode::Concat => {
                    let d = separable_proj(&mut g, "agg.detail", detail, c3)?;
                    let s = separable_proj(&mut g, "agg.semantic", taps.s5_post, c3)?;
                    let s_up = g.upsample("agg.up", s, 4)?;
                    if cfg.agg == AggMode::Sum {
                        g.add_nodes("agg.merge", d, s_up)?
                    } else {
                        g.concat("agg.merge", &[d, s_up])?
                    }
                }
            };

            for pos in &cfg.boosters {
                let tap = match pos {
                    BoosterPos::Stage2 => taps.stem,
                    BoosterPos::Stage3 => taps.s3,
                    BoosterPos::Stage4 => taps.s4,
                    BoosterPos::Stage5_4 => taps.s5_pre,
                    BoosterPos::Stage5_5 => taps.s5_post,
                };
                let c_mid = cfg.aux_width_factor * g.node_channels(tap);
                let head = seg_head(
                    &mut g,
                    &format!("head.aux.{}", pos.name()),
                    tap,
                    c_mid,
                    cfg.classes,
                    pos.scale(),
                )?;
                g.mark_output(&pos.output_name(), head)?;
            }

            (merged, 8)
        }
    };

    let main = seg_head(&mut g, "head.main", trunk_out, widths.head, cfg.classes, head_scale)?;
    g.mark_output(OUTPUT_MAIN, main)?;
    Ok(g)
}

/// Runs the main head on a single image in eval mode and returns the raw
/// logits at the configured network resolution. The image is
/// bilinear-resized to that resolution first if needed.
pub fn infer_logits<S: Scalar>(
    graph: &Graph<S>,
    cfg: &ArchConfig,
    image: &Tensor<S>,
) -> Result<Tensor<S>> {
    let shape = image.shape();
    if shape.n != 1 || shape.c != 3 {
        return Err(Error::config(format!(
            "inference expects a (1, 3, h, w) image, got {shape}"
        )));
    }
    let (ih, iw) = cfg.input_hw;
    let net_in = if (shape.h, shape.w) == (ih, iw) {
        image.clone()
    } else {
        resize_bilinear(image, ih, iw)?
    };
    let trace = graph.forward(&[("input", &net_in)], &[OUTPUT_MAIN], Mode::Eval)?;
    let logits = trace
        .value(graph.output_node(OUTPUT_MAIN).expect("main head exists"))
        .expect("main output evaluated");
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits during inference".into()));
    }
    Ok(logits.clone())
}

/// End-to-end single-image inference: bilinear-resize the image to the
/// configured input size, run the main head in eval mode, take the pixel
/// argmax, and nearest-resize the labels back to the original size.
pub fn forward_inference<S: Scalar>(
    graph: &Graph<S>,
    cfg: &ArchConfig,
    image: &Tensor<S>,
) -> Result<LabelMap> {
    let logits = infer_logits(graph, cfg, image)?;
    let labels = argmax_channels(&logits)?;
    let shape = image.shape();
    labels.resize_nearest(shape.h, shape.w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn default_widths_match_the_published_configuration() {
        let w = ArchConfig::default().widths();
        assert_eq!(w.detail, [64, 64, 128]);
        assert_eq!((w.stem, w.s3, w.s4, w.s5), (16, 32, 64, 128));
        assert_eq!(w.head, 1024);
    }

    #[test]
    fn small_alpha_and_lambda_round_to_minimums() {
        let cfg = ArchConfig {
            lambda_num: 1,
            lambda_den: 16,
            alpha: 0.25,
            ..ArchConfig::default()
        };
        let w = cfg.widths();
        assert_eq!(w.detail, [16, 16, 32]);
        assert_eq!(w.stem, 4, "stem floor is one group of 4");
        assert_eq!(w.s3, 8, "8 is the minimum for 8-rounded widths");
    }

    #[test]
    fn full_model_builds_and_exposes_expected_outputs() {
        let cfg = ArchConfig::default();
        let g = build_model::<f32>(&cfg, Variant::Full).unwrap();
        let mut outs = g.output_names();
        outs.sort_unstable();
        assert_eq!(
            outs,
            vec![
                "logits.aux.stage2",
                "logits.aux.stage3",
                "logits.aux.stage4",
                "logits.aux.stage5_4",
                "logits.main",
            ]
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ArchConfig { classes: 1, ..ArchConfig::default() };
        assert!(build_model::<f32>(&cfg, Variant::Full).is_err());
        cfg = ArchConfig { input_hw: (100, 1024), ..ArchConfig::default() };
        assert!(build_model::<f32>(&cfg, Variant::Full).is_err());
        cfg = ArchConfig {
            boosters: vec![BoosterPos::Stage2, BoosterPos::Stage2],
            ..ArchConfig::default()
        };
        assert!(build_model::<f32>(&cfg, Variant::Full).is_err());
    }

    #[test]
    fn trunk_parameters_are_identical_with_and_without_boosters() {
        let with = build_model::<f32>(&ArchConfig::default(), Variant::Full).unwrap();
        let without = build_model::<f32>(
            &ArchConfig { boosters: vec![], ..ArchConfig::default() },
            Variant::Full,
        )
        .unwrap();
        let mut with = with;
        let mut without = without;
        with.init_params(99);
        without.init_params(99);
        let names: Vec<String> = (0..without.param_count())
            .map(|i| without.param_def(crate::graph::ParamId(i)).name.clone())
            .collect();
        for name in names {
            let a = with.param(with.param_id(&name).unwrap());
            let b = without.param(without.param_id(&name).unwrap());
            assert_eq!(a.data(), b.data(), "{name} differs");
        }
    }

    #[test]
    fn tiny_full_model_runs_forward_at_reduced_size() {
        let cfg = ArchConfig {
            classes: 3,
            alpha: 0.25,
            head_width: 64,
            input_hw: (64, 64),
            boosters: vec![BoosterPos::Stage3],
            ..ArchConfig::default()
        };
        let mut g = build_model::<f32>(&cfg, Variant::Full).unwrap();
        g.init_params(7);
        let img = Tensor::filled(Shape4::new(1, 3, 64, 64), 0.5);
        let labels = forward_inference(&g, &cfg, &img).unwrap();
        assert_eq!((labels.h, labels.w), (64, 64));
        assert!(labels.data.iter().all(|&l| l < 3));
    }
}
