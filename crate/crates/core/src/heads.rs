//! Detection heads, anchor generation and distribution-based box decoding.

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, NodeId, Section};
use crate::nn::{conv_bn_act, partial_channels};
use crate::tensor::{Activation, ConvSpec, Tensor};

/// Prior probability used to initialise classification biases.
pub const CLS_PRIOR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadVariant {
    /// Per-scale, per-branch convolution stacks.
    Decoupled,
    /// One convolution stack reused by every scale.
    Shared,
}

/// Layer type at a position of the shared stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadLayer {
    /// 1×1 Conv + BN + SiLU.
    #[serde(alias = "conv")]
    Conv,
    /// 3×3 partial convolution.
    #[serde(alias = "pconv")]
    PConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    #[serde(default = "default_layer1")]
    pub layer1: HeadLayer,
    #[serde(default = "default_layer2")]
    pub layer2: HeadLayer,
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default = "default_bins")]
    pub dfl_bins: usize,
    /// Width of the shared stack; `None` picks the narrowest input scale.
    #[serde(default)]
    pub hidden_channels: Option<usize>,
    /// Per-scale input widths; filled in by the model builder.
    #[serde(default)]
    pub in_channels: Vec<usize>,
    #[serde(default = "default_partial_ratio")]
    pub pconv_ratio: f64,
}

fn default_layer1() -> HeadLayer {
    HeadLayer::PConv
}
fn default_layer2() -> HeadLayer {
    HeadLayer::Conv
}
fn default_bins() -> usize {
    16
}
fn default_partial_ratio() -> f64 {
    0.25
}

impl HeadConfig {
    pub fn decoupled(num_classes: usize, in_channels: Vec<usize>) -> Self {
        Self {
            variant: HeadVariant::Decoupled,
            layer1: default_layer1(),
            layer2: default_layer2(),
            num_classes,
            dfl_bins: default_bins(),
            hidden_channels: None,
            in_channels,
            pconv_ratio: default_partial_ratio(),
        }
    }

    pub fn shared(
        num_classes: usize,
        in_channels: Vec<usize>,
        layer1: HeadLayer,
        layer2: HeadLayer,
    ) -> Self {
        Self {
            variant: HeadVariant::Shared,
            layer1,
            layer2,
            ..Self::decoupled(num_classes, in_channels)
        }
    }

    pub fn reg_max(&self) -> usize {
        self.dfl_bins - 1
    }

    pub fn reg_channels(&self) -> usize {
        4 * self.dfl_bins
    }

    pub fn hidden(&self) -> Result<usize> {
        match self.hidden_channels {
            Some(0) => Err(Error::invalid("head", "hidden_channels must be >= 1")),
            Some(h) => Ok(h),
            None => self
                .in_channels
                .iter()
                .copied()
                .min()
                .ok_or_else(|| Error::invalid("head", "no input scales")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dfl_bins < 2 {
            return Err(Error::invalid(
                "head",
                format!("dfl_bins {} < 2", self.dfl_bins),
            ));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("head", "num_classes must be >= 1"));
        }
        if self.in_channels.is_empty() {
            return Err(Error::invalid("head", "no input scales"));
        }
        if self.variant == HeadVariant::Decoupled && self.in_channels.len() != 3 {
            return Err(Error::invalid(
                "head",
                format!(
                    "decoupled head needs 3 scales, got {}",
                    self.in_channels.len()
                ),
            ));
        }
        if self.variant == HeadVariant::Shared {
            self.hidden()?;
        }
        Ok(())
    }
}

/// Initial classification bias for prior probability `p`.
pub fn prior_bias(p: f64) -> f32 {
    (-((1.0 - p) / p).ln()) as f32
}

/// Appends the configured head. Returns `(reg, cls)` output nodes per scale.
pub fn build_head(
    b: &mut GraphBuilder,
    features: &[NodeId],
    cfg: &HeadConfig,
) -> Result<Vec<(NodeId, NodeId)>> {
    cfg.validate()?;
    if features.len() != cfg.in_channels.len() {
        return Err(Error::invalid(
            "head",
            format!(
                "{} feature maps for {} configured scales",
                features.len(),
                cfg.in_channels.len()
            ),
        ));
    }
    for (i, (&f, &c)) in features.iter().zip(&cfg.in_channels).enumerate() {
        if b.channels(f) != c {
            return Err(Error::Graph {
                edge: format!("{} -> head.scale{i}", b.layers()[f].name),
                detail: format!("{} channels, head configured for {c}", b.channels(f)),
            });
        }
    }
    b.set_section(Section::Head);
    match cfg.variant {
        HeadVariant::Decoupled => decoupled(b, features, cfg),
        HeadVariant::Shared => shared(b, features, cfg),
    }
}

fn decoupled(
    b: &mut GraphBuilder,
    features: &[NodeId],
    cfg: &HeadConfig,
) -> Result<Vec<(NodeId, NodeId)>> {
    let ch0 = cfg.in_channels[0];
    let c_reg = 16.max(ch0 / 4).max(cfg.reg_channels());
    let c_cls = ch0.max(cfg.num_classes.min(100));
    let silu = Activation::Silu;
    let mut outs = Vec::new();
    for (i, &f) in features.iter().enumerate() {
        b.set_block(format!("head.scale{i}"));
        let r = conv_bn_act(b, &format!("head.reg{i}.0"), f, c_reg, 3, 1, silu)?;
        let r = conv_bn_act(b, &format!("head.reg{i}.1"), r, c_reg, 3, 1, silu)?;
        let name = format!("head.reg{i}.pred");
        let spec = ConvSpec::new(c_reg, cfg.reg_channels(), 1).with_bias(true);
        let reg = b.conv_with_bias_init(
            &name,
            r,
            spec,
            false,
            Activation::Identity,
            &name,
            Some(1.0),
        )?;
        let k = conv_bn_act(b, &format!("head.cls{i}.0"), f, c_cls, 3, 1, silu)?;
        let k = conv_bn_act(b, &format!("head.cls{i}.1"), k, c_cls, 3, 1, silu)?;
        let name = format!("head.cls{i}.pred");
        let spec = ConvSpec::new(c_cls, cfg.num_classes, 1).with_bias(true);
        let cls = b.conv_with_bias_init(
            &name,
            k,
            spec,
            false,
            Activation::Identity,
            &name,
            Some(prior_bias(CLS_PRIOR)),
        )?;
        outs.push((reg, cls));
    }
    Ok(outs)
}

fn shared_layer(
    b: &mut GraphBuilder,
    scale: usize,
    pos: usize,
    x: NodeId,
    kind: HeadLayer,
    cfg: &HeadConfig,
) -> Result<NodeId> {
    let name = format!("head.p{scale}.layer{pos}");
    let slot = format!("head.shared.layer{pos}");
    let h = b.channels(x);
    match kind {
        HeadLayer::Conv => b.conv(
            &name,
            x,
            ConvSpec::new(h, h, 1),
            true,
            Activation::Silu,
            &slot,
        ),
        HeadLayer::PConv => {
            let cp = partial_channels(h, cfg.pconv_ratio)?;
            b.partial_conv(&name, x, cp, 3, &slot)
        }
    }
}

fn shared(
    b: &mut GraphBuilder,
    features: &[NodeId],
    cfg: &HeadConfig,
) -> Result<Vec<(NodeId, NodeId)>> {
    let hidden = cfg.hidden()?;
    let mut outs = Vec::new();
    for (i, &f) in features.iter().enumerate() {
        b.set_block(format!("head.scale{i}"));
        let p = conv_bn_act(
            b,
            &format!("head.proj{i}"),
            f,
            hidden,
            1,
            1,
            Activation::Silu,
        )?;
        let y = shared_layer(b, i, 1, p, cfg.layer1, cfg)?;
        let y = shared_layer(b, i, 2, y, cfg.layer2, cfg)?;
        let spec = ConvSpec::new(hidden, cfg.reg_channels(), 1).with_bias(true);
        let reg = b.conv_with_bias_init(
            &format!("head.p{i}.reg"),
            y,
            spec,
            false,
            Activation::Identity,
            "head.shared.reg",
            Some(1.0),
        )?;
        let spec = ConvSpec::new(hidden, cfg.num_classes, 1).with_bias(true);
        let cls = b.conv_with_bias_init(
            &format!("head.p{i}.cls"),
            y,
            spec,
            false,
            Activation::Identity,
            "head.shared.cls",
            Some(prior_bias(CLS_PRIOR)),
        )?;
        outs.push((reg, cls));
    }
    Ok(outs)
}

/// One scale of anchor points.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorLevel {
    pub height: usize,
    pub width: usize,
    /// Pixels per feature cell.
    pub stride: f64,
    /// Cell centres in feature units, row-major.
    pub points: Vec<[f64; 2]>,
}

/// Anchor points for every scale, in head output order.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub levels: Vec<AnchorLevel>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.points.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(centre_x_px, centre_y_px, stride)` for every anchor in order.
    pub fn pixel_centers(&self) -> Vec<(f64, f64, f64)> {
        self.levels
            .iter()
            .flat_map(|l| {
                l.points
                    .iter()
                    .map(move |p| (p[0] * l.stride, p[1] * l.stride, l.stride))
            })
            .collect()
    }

    pub fn strides(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.stride).collect()
    }
}

/// Builds anchors from feature extents `(h, w)` and the input extent.
pub fn dynamic_anchor_stride(
    feature_shapes: &[(usize, usize)],
    input_size: (usize, usize),
) -> Result<AnchorSet> {
    let mut levels = Vec::with_capacity(feature_shapes.len());
    for &(h, w) in feature_shapes {
        if h == 0 || w == 0 || input_size.0 % h != 0 || input_size.1 % w != 0 {
            return Err(Error::invalid(
                "anchor grid",
                format!(
                    "feature {h}x{w} does not divide input {}x{}",
                    input_size.0, input_size.1
                ),
            ));
        }
        let (sy, sx) = (input_size.0 / h, input_size.1 / w);
        if sy != sx {
            return Err(Error::invalid(
                "anchor grid",
                format!("anisotropic stride {sy}x{sx}"),
            ));
        }
        let points = (0..h)
            .flat_map(|y| (0..w).map(move |x| [x as f64 + 0.5, y as f64 + 0.5]))
            .collect();
        levels.push(AnchorLevel {
            height: h,
            width: w,
            stride: sy as f64,
            points,
        });
    }
    Ok(AnchorSet { levels })
}

/// Memoises the anchor set for the most recent shapes.
#[derive(Debug, Default)]
pub struct AnchorCache {
    key: Option<(Vec<(usize, usize)>, (usize, usize))>,
    anchors: Option<AnchorSet>,
}

impl AnchorCache {
    pub fn get(
        &mut self,
        feature_shapes: &[(usize, usize)],
        input_size: (usize, usize),
    ) -> Result<&AnchorSet> {
        let key = (feature_shapes.to_vec(), input_size);
        if self.key.as_ref() != Some(&key) || self.anchors.is_none() {
            self.anchors = Some(dynamic_anchor_stride(feature_shapes, input_size)?);
            self.key = Some(key);
        }
        Ok(self.anchors.as_ref().expect("set above"))
    }
}

/// Softmax expectation `Σ i·p_i` of one side's bin logits.
pub fn dfl_expectation(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut acc = 0.0;
    for (i, &l) in logits.iter().enumerate() {
        let e = (l - m).exp();
        z += e;
        acc += i as f64 * e;
    }
    acc / z
}

/// Left/top/right/bottom distances (feature units) clamped to `[0, reg_max]`.
pub fn decode_distances(reg: &[f64], bins: usize) -> [f64; 4] {
    let mut d = [0.0; 4];
    for (side, out) in d.iter_mut().enumerate() {
        *out = dfl_expectation(&reg[side * bins..(side + 1) * bins]).clamp(0.0, (bins - 1) as f64);
    }
    d
}

/// Box in pixels from an anchor centre (feature units), distances and stride.
pub fn distances_to_box(point: [f64; 2], d: [f64; 4], stride: f64) -> BBox {
    BBox::new(
        (point[0] - d[0]) * stride,
        (point[1] - d[1]) * stride,
        (point[0] + d[2]) * stride,
        (point[1] + d[3]) * stride,
    )
}

/// Per-anchor predictions for one image, flattened across scales.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub bins: usize,
    pub num_classes: usize,
    /// `anchors × 4·bins`, side-major within an anchor.
    pub reg: Vec<f64>,
    /// `anchors × num_classes` logits.
    pub cls: Vec<f64>,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.cls.len() / self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        self.cls.is_empty()
    }

    pub fn reg_row(&self, a: usize) -> &[f64] {
        &self.reg[a * 4 * self.bins..(a + 1) * 4 * self.bins]
    }

    pub fn cls_row(&self, a: usize) -> &[f64] {
        &self.cls[a * self.num_classes..(a + 1) * self.num_classes]
    }

    /// Decoded boxes for every anchor.
    pub fn boxes(&self, anchors: &AnchorSet) -> Vec<BBox> {
        let mut out = Vec::with_capacity(self.len());
        let mut a = 0;
        for l in &anchors.levels {
            for p in &l.points {
                let d = decode_distances(self.reg_row(a), self.bins);
                out.push(distances_to_box(*p, d, l.stride));
                a += 1;
            }
        }
        out
    }
}

/// Gathers image `batch_index` of per-scale `(reg, cls)` maps into anchor rows.
pub fn flatten_outputs(
    outputs: &[(Tensor, Tensor)],
    bins: usize,
    batch_index: usize,
) -> Result<Predictions> {
    let mut reg = Vec::new();
    let mut cls = Vec::new();
    let mut nc = 0;
    for (r, c) in outputs {
        let (n, rc, h, w) = r.dims4()?;
        let (n2, cc, h2, w2) = c.dims4()?;
        if rc != 4 * bins || (n, h, w) != (n2, h2, w2) || batch_index >= n {
            return Err(Error::shape(
                "flatten_outputs",
                format!("reg {:?} / cls {:?} for {bins} bins", r.shape(), c.shape()),
            ));
        }
        nc = cc;
        let plane = h * w;
        let rd = &r.data()[batch_index * rc * plane..(batch_index + 1) * rc * plane];
        let cd = &c.data()[batch_index * cc * plane..(batch_index + 1) * cc * plane];
        for p in 0..plane {
            reg.extend((0..rc).map(|ch| rd[ch * plane + p] as f64));
            cls.extend((0..cc).map(|ch| cd[ch * plane + p] as f64));
        }
    }
    Ok(Predictions {
        bins,
        num_classes: nc,
        reg,
        cls,
    })
}
