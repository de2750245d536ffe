//! Full detectors: backbone, PAN neck and head, built from a declarative config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    execute, Eager, GraphBuilder, ModelGraph, NodeId, ParamStore, Section, StorageDtype,
};
use crate::heads::{build_head, dynamic_anchor_stride, AnchorSet, HeadConfig, HeadLayer};
use crate::nn::{c2f, conv_bn_act, dw_conv, hg_block, hg_stem, sppf, HgBlockSpec};
use crate::tensor::{Activation, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    N,
    S,
    M,
    L,
    X,
}

impl Scale {
    pub const ALL: [Scale; 5] = [Scale::N, Scale::S, Scale::M, Scale::L, Scale::X];

    /// `(depth, width, max_channels)`.
    pub fn multipliers(self) -> (f64, f64, usize) {
        match self {
            Scale::N => (0.33, 0.25, 1024),
            Scale::S => (0.33, 0.50, 1024),
            Scale::M => (0.67, 0.75, 768),
            Scale::L => (1.00, 1.00, 512),
            Scale::X => (1.00, 1.25, 512),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "n" => Ok(Scale::N),
            "s" => Ok(Scale::S),
            "m" => Ok(Scale::M),
            "l" => Ok(Scale::L),
            "x" => Ok(Scale::X),
            _ => Err(Error::Config(format!(
                "unknown scale {s:?} (expected n|s|m|l|x)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    #[serde(rename = "hgnetv2")]
    HgNetV2,
    #[serde(rename = "c2f-baseline")]
    C2fBaseline,
}

impl BackboneKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hgnetv2" => Ok(BackboneKind::HgNetV2),
            "c2f-baseline" => Ok(BackboneKind::C2fBaseline),
            _ => Err(Error::Config(format!(
                "unknown backbone {s:?} (expected hgnetv2|c2f-baseline)"
            ))),
        }
    }
}

/// One aggregation stage, in unscaled (width 1.0, depth 1.0) units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HgStage {
    pub mid: usize,
    pub out: usize,
    #[serde(default = "one")]
    pub blocks: usize,
    #[serde(default = "six")]
    pub layer_num: usize,
    #[serde(default = "three")]
    pub kernel: usize,
    /// Depthwise stride-2 downsample before the stage.
    #[serde(default)]
    pub downsample: bool,
}

fn one() -> usize {
    1
}
fn six() -> usize {
    6
}
fn three() -> usize {
    3
}

/// Default aggregation backbone schedule (unscaled).
pub fn default_hg_stages() -> Vec<HgStage> {
    let stage = |mid, out, blocks, kernel, downsample| HgStage {
        mid,
        out,
        blocks,
        layer_num: 6,
        kernel,
        downsample,
    };
    vec![
        stage(64, 128, 1, 3, false),
        stage(128, 256, 1, 3, true),
        stage(256, 512, 2, 5, true),
        stage(1024, 1024, 6, 5, true),
    ]
}

fn default_stem() -> [usize; 2] {
    [32, 64]
}

fn default_ghost_stages() -> Vec<bool> {
    vec![false, false, true, true]
}

fn default_num_classes() -> usize {
    4
}

fn default_input_size() -> usize {
    640
}

/// The `model` section of a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub scale: Scale,
    pub backbone: BackboneKind,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    /// Per-stage switch to ghost aggregation blocks.
    #[serde(default = "default_ghost_stages")]
    pub ghost_stages: Vec<bool>,
    #[serde(default = "default_stem")]
    pub stem: [usize; 2],
    #[serde(default = "default_hg_stages")]
    pub stages: Vec<HgStage>,
    /// Overrides the scale's width multiplier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_mult: Option<f64>,
    /// Overrides the scale's depth multiplier.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_mult: Option<f64>,
}

impl ModelSpec {
    pub fn new(scale: Scale, backbone: BackboneKind) -> Self {
        Self {
            scale,
            backbone,
            num_classes: default_num_classes(),
            input_size: default_input_size(),
            ghost_stages: default_ghost_stages(),
            stem: default_stem(),
            stages: default_hg_stages(),
            width_mult: None,
            depth_mult: None,
        }
    }

    fn multipliers(&self) -> (f64, f64, usize) {
        let (d, w, m) = self.scale.multipliers();
        (
            self.depth_mult.unwrap_or(d),
            self.width_mult.unwrap_or(w),
            m,
        )
    }

    /// Scaled channel count rounded up to a multiple of 8.
    pub fn width(&self, c: usize) -> usize {
        let (_, w, max) = self.multipliers();
        let v = c.min(max) as f64 * w;
        ((v / 8.0).ceil() as usize * 8).max(8)
    }

    /// Scaled repeat count, at least 1.
    pub fn depth(&self, n: usize) -> usize {
        let (d, _, _) = self.multipliers();
        ((n as f64 * d).round() as usize).max(1)
    }
}

/// Everything needed to build a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model: ModelSpec,
    pub head: HeadConfig,
}

impl ModelConfig {
    /// HGNetV2 backbone with the shared PConv/Conv head.
    pub fn hgo(scale: Scale) -> Self {
        let model = ModelSpec::new(scale, BackboneKind::HgNetV2);
        let head = HeadConfig::shared(
            model.num_classes,
            Vec::new(),
            HeadLayer::PConv,
            HeadLayer::Conv,
        );
        Self { model, head }
    }

    /// C2f backbone with the per-scale decoupled head.
    pub fn baseline(scale: Scale) -> Self {
        let model = ModelSpec::new(scale, BackboneKind::C2fBaseline);
        let head = HeadConfig::decoupled(model.num_classes, Vec::new());
        Self { model, head }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.input_size == 0 || m.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 32",
                m.input_size
            )));
        }
        if m.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if m.backbone == BackboneKind::HgNetV2 {
            if m.stages.len() != 4 {
                return Err(Error::Config(format!(
                    "expected 4 backbone stages, got {}",
                    m.stages.len()
                )));
            }
            if m.ghost_stages.len() != m.stages.len() {
                return Err(Error::Config(
                    "ghost_stages must have one flag per stage".into(),
                ));
            }
            let downs = m.stages.iter().filter(|s| s.downsample).count();
            if downs != 3 || m.stages[0].downsample {
                return Err(Error::Config(
                    "stages 2-4 must downsample and stage 1 must not".into(),
                ));
            }
        }
        if let Some(w) = m.width_mult {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("width_mult {w} must be positive")));
            }
        }
        if let Some(d) = m.depth_mult {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Config(format!("depth_mult {d} must be positive")));
            }
        }
        Ok(())
    }
}

/// Returns `(P3, P4, P5)` feature nodes.
fn hg_backbone(b: &mut GraphBuilder, x: NodeId, m: &ModelSpec) -> Result<[NodeId; 3]> {
    b.set_block("backbone.stem");
    let mut cur = hg_stem(
        b,
        "backbone.stem",
        x,
        m.width(m.stem[0]),
        m.width(m.stem[1]),
    )?;
    let mut taps = Vec::new();
    for (i, st) in m.stages.iter().enumerate() {
        let stage = format!("backbone.stage{}", i + 1);
        b.set_block(stage.clone());
        if st.downsample {
            let c = b.channels(cur);
            cur = dw_conv(
                b,
                &format!("{stage}.down"),
                cur,
                c,
                3,
                2,
                Activation::Identity,
            )?;
        }
        let (mid, out) = (m.width(st.mid), m.width(st.out));
        for k in 0..st.blocks {
            let spec = HgBlockSpec {
                in_channels: b.channels(cur),
                mid_channels: mid,
                out_channels: out,
                layer_num: m.depth(st.layer_num),
                kernel: st.kernel,
                use_ghost: m.ghost_stages[i],
                shortcut: k > 0,
            };
            cur = hg_block(b, &format!("{stage}.block{k}"), cur, &spec)?;
        }
        taps.push(cur);
    }
    b.set_block("backbone.sppf");
    let c = b.channels(cur);
    let p5 = sppf(b, "backbone.sppf", cur, c)?;
    Ok([taps[1], taps[2], p5])
}

fn c2f_backbone(b: &mut GraphBuilder, x: NodeId, m: &ModelSpec) -> Result<[NodeId; 3]> {
    let silu = Activation::Silu;
    b.set_block("backbone.stem");
    let mut cur = conv_bn_act(b, "backbone.stem", x, m.width(64), 3, 2, silu)?;
    let mut taps = Vec::new();
    for (i, (c, n)) in [(128, 3), (256, 6), (512, 6), (1024, 3)]
        .into_iter()
        .enumerate()
    {
        let stage = format!("backbone.stage{}", i + 1);
        b.set_block(stage.clone());
        cur = conv_bn_act(b, &format!("{stage}.down"), cur, m.width(c), 3, 2, silu)?;
        cur = c2f(
            b,
            &format!("{stage}.c2f"),
            cur,
            m.width(c),
            m.depth(n),
            true,
        )?;
        taps.push(cur);
    }
    b.set_block("backbone.sppf");
    let p5 = sppf(b, "backbone.sppf", cur, m.width(1024))?;
    Ok([taps[1], taps[2], p5])
}

/// Top-down then bottom-up fusion; returns the three output scales.
fn pan_neck(b: &mut GraphBuilder, feats: [NodeId; 3], m: &ModelSpec) -> Result<[NodeId; 3]> {
    b.set_section(Section::Neck);
    let [p3, p4, p5] = feats;
    let n = m.depth(3);
    let silu = Activation::Silu;

    b.set_block("neck.td4");
    let u = b.upsample("neck.td4.up", p5, 2);
    let cat = b.concat("neck.td4.cat", &[u, p4])?;
    let t4 = c2f(b, "neck.td4.c2f", cat, m.width(512), n, false)?;

    b.set_block("neck.td3");
    let u = b.upsample("neck.td3.up", t4, 2);
    let cat = b.concat("neck.td3.cat", &[u, p3])?;
    let o3 = c2f(b, "neck.td3.c2f", cat, m.width(256), n, false)?;

    b.set_block("neck.bu4");
    let d = conv_bn_act(b, "neck.bu4.down", o3, m.width(256), 3, 2, silu)?;
    let cat = b.concat("neck.bu4.cat", &[d, t4])?;
    let o4 = c2f(b, "neck.bu4.c2f", cat, m.width(512), n, false)?;

    b.set_block("neck.bu5");
    let d = conv_bn_act(b, "neck.bu5.down", o4, m.width(512), 3, 2, silu)?;
    let cat = b.concat("neck.bu5.cat", &[d, p5])?;
    let o5 = c2f(b, "neck.bu5.c2f", cat, m.width(1024), n, false)?;
    Ok([o3, o4, o5])
}

/// Assembles the graph; the returned head config has its input widths filled in.
/// Graph outputs are `reg0, cls0, reg1, cls1, reg2, cls2`.
pub fn build_graph(config: &ModelConfig) -> Result<(ModelGraph, HeadConfig)> {
    config.validate()?;
    let m = &config.model;
    let mut b = GraphBuilder::new();
    let x = b.input("image", 3);
    b.set_section(Section::Backbone);
    let feats = match m.backbone {
        BackboneKind::HgNetV2 => hg_backbone(&mut b, x, m)?,
        BackboneKind::C2fBaseline => c2f_backbone(&mut b, x, m)?,
    };
    let outs = pan_neck(&mut b, feats, m)?;
    let mut head = config.head.clone();
    head.num_classes = m.num_classes;
    head.in_channels = outs.iter().map(|&o| b.channels(o)).collect();
    let preds = build_head(&mut b, &outs, &head)?;
    let graph = b.finish(preds.iter().flat_map(|&(r, c)| [r, c]).collect());
    graph.infer_shapes((m.input_size, m.input_size))?;
    Ok((graph, head))
}

/// A built network with parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub head: HeadConfig,
    pub graph: ModelGraph,
    pub params: ParamStore,
}

impl Model {
    /// Builds and initialises deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (graph, head) = build_graph(&config)?;
        let params = ParamStore::init(&graph, seed);
        Ok(Self {
            config,
            head,
            graph,
            params,
        })
    }

    pub fn input_size(&self) -> usize {
        self.config.model.input_size
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Checks a batch against the configured input extent.
    pub fn check_input(&self, image: &Tensor) -> Result<()> {
        let (_, c, h, w) = image.dims4()?;
        let s = self.input_size();
        if c != 3 || h != s || w != s {
            return Err(Error::shape(
                "model input",
                format!("expected (N,3,{s},{s}), got {:?}", image.shape()),
            ));
        }
        Ok(())
    }

    /// Inference forward pass: `(reg, cls)` per scale.
    pub fn forward(&self, image: &Tensor) -> Result<Vec<(Tensor, Tensor)>> {
        self.check_input(image)?;
        let mut be = Eager::new(&self.params);
        let outs = execute(&self.graph, &mut be, vec![image.clone()])?;
        Ok(pair_outputs(outs))
    }

    /// Anchors for the configured input size.
    pub fn anchors(&self) -> Result<AnchorSet> {
        let s = self.input_size();
        let shapes = self.graph.infer_shapes((s, s))?;
        let feats: Vec<(usize, usize)> = self
            .graph
            .outputs()
            .iter()
            .step_by(2)
            .map(|&o| (shapes[o].1, shapes[o].2))
            .collect();
        dynamic_anchor_stride(&feats, (s, s))
    }

    pub fn save_weights(&self, path: &Path, dtype: StorageDtype) -> Result<()> {
        self.params.save(path, dtype)
    }

    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        self.params = ParamStore::load(path, &self.graph)?;
        Ok(())
    }
}

/// Regroups flat `[reg0, cls0, reg1, ...]` outputs into pairs.
pub fn pair_outputs<V>(outs: Vec<V>) -> Vec<(V, V)> {
    let mut it = outs.into_iter();
    let mut pairs = Vec::new();
    while let (Some(r), Some(c)) = (it.next(), it.next()) {
        pairs.push((r, c));
    }
    pairs
}
