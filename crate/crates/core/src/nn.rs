//! Composite layers expressed as graph fragments.
//!
//! Each builder appends layers to a [`GraphBuilder`] under a name prefix and
//! returns the output node. [`Fragment`] wraps a stand-alone block with its own
//! parameters for direct evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{execute, Eager, GraphBuilder, ModelGraph, NodeId, ParamStore};
use crate::tensor::{Activation, ConvSpec, Tensor};

/// Ghost module hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GhostSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Expansion ratio `s`: output width over primary width.
    pub ratio: usize,
    pub cheap_kernel: usize,
    pub primary_kernel: usize,
}

impl GhostSpec {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            ratio: 2,
            cheap_kernel: 3,
            primary_kernel: 1,
        }
    }

    /// Width of the primary convolution output.
    pub fn primary_channels(&self) -> usize {
        self.out_channels / self.ratio
    }

    /// Width produced by the cheap operation.
    pub fn cheap_channels(&self) -> usize {
        self.out_channels - self.primary_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio == 0 || self.out_channels == 0 || self.out_channels % self.ratio != 0 {
            return Err(Error::invalid(
                "ghost spec",
                format!(
                    "out_channels {} not divisible by ratio {}",
                    self.out_channels, self.ratio
                ),
            ));
        }
        if self.cheap_kernel % 2 == 0 || self.primary_kernel % 2 == 0 {
            return Err(Error::invalid("ghost spec", "kernels must be odd"));
        }
        if self.in_channels == 0 {
            return Err(Error::invalid("ghost spec", "in_channels must be >= 1"));
        }
        Ok(())
    }

    /// The primary convolution.
    pub fn primary_conv(&self) -> ConvSpec {
        ConvSpec::new(
            self.in_channels,
            self.primary_channels(),
            self.primary_kernel,
        )
    }

    /// The cheap grouped convolution (`None` when `ratio == 1`).
    pub fn cheap_conv(&self) -> Option<ConvSpec> {
        let m = self.primary_channels();
        (self.ratio > 1)
            .then(|| ConvSpec::new(m, self.cheap_channels(), self.cheap_kernel).groups(m))
    }
}

/// Hierarchical-aggregation block hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HgBlockSpec {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub layer_num: usize,
    pub kernel: usize,
    pub use_ghost: bool,
    pub shortcut: bool,
}

impl HgBlockSpec {
    pub fn new(in_channels: usize, mid_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            mid_channels,
            out_channels,
            layer_num: 6,
            kernel: 3,
            use_ghost: false,
            shortcut: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shortcut && self.in_channels != self.out_channels {
            return Err(Error::invalid(
                "hg block spec",
                format!(
                    "shortcut needs in == out, got {} -> {}",
                    self.in_channels, self.out_channels
                ),
            ));
        }
        if self.layer_num == 0 || self.mid_channels == 0 {
            return Err(Error::invalid(
                "hg block spec",
                "layer_num and mid_channels must be >= 1",
            ));
        }
        if self.out_channels < 2 || self.out_channels % 2 != 0 {
            return Err(Error::invalid("hg block spec", "out_channels must be even"));
        }
        if self.use_ghost && self.mid_channels % 2 != 0 {
            return Err(Error::invalid(
                "hg block spec",
                "ghost layers need even mid_channels",
            ));
        }
        Ok(())
    }

    /// Width of the aggregated concat.
    pub fn concat_channels(&self) -> usize {
        self.layer_num * self.mid_channels
    }
}

/// Conv (same padding, no bias) + BN + activation.
pub fn conv_bn_act(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    act: Activation,
) -> Result<NodeId> {
    let spec = ConvSpec::new(b.channels(x), out_channels, kernel).stride(stride);
    b.conv(name, x, spec, true, act, name)
}

/// Grouped (depthwise when widths match) conv + BN + activation.
pub fn dw_conv(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    act: Activation,
) -> Result<NodeId> {
    let c = b.channels(x);
    let spec = ConvSpec::new(c, out_channels, kernel)
        .stride(stride)
        .groups(gcd(c, out_channels));
    b.conv(name, x, spec, true, act, name)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Ghost module. With `norm_act = None` both convolutions are bare; otherwise
/// each is followed by BN and the given activation.
pub fn ghost_conv(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    spec: &GhostSpec,
    norm_act: Option<Activation>,
) -> Result<NodeId> {
    spec.validate()?;
    let (norm, act) = match norm_act {
        Some(a) => (true, a),
        None => (false, Activation::Identity),
    };
    let primary = b.conv(
        &format!("{name}.primary"),
        x,
        spec.primary_conv(),
        norm,
        act,
        &format!("{name}.primary"),
    )?;
    match spec.cheap_conv() {
        None => Ok(primary),
        Some(cheap_spec) => {
            let cheap = b.conv(
                &format!("{name}.cheap"),
                primary,
                cheap_spec,
                norm,
                act,
                &format!("{name}.cheap"),
            )?;
            b.concat(&format!("{name}.cat"), &[primary, cheap])
        }
    }
}

/// Number of convolved channels for a partial convolution over `channels`.
pub fn partial_channels(channels: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(
            "partial ratio",
            format!("{ratio} not in (0, 1]"),
        ));
    }
    let cp = (channels as f64 * ratio).floor() as usize;
    if cp == 0 {
        return Err(Error::invalid(
            "partial ratio",
            format!("{ratio} of {channels} channels convolves nothing"),
        ));
    }
    Ok(cp)
}

/// Partial convolution: `k×k` over the leading `floor(c·r)` channels, identity on the rest.
pub fn pconv(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    ratio: f64,
    kernel: usize,
) -> Result<NodeId> {
    let cp = partial_channels(b.channels(x), ratio)?;
    b.partial_conv(name, x, cp, kernel, name)
}

/// Stem with ×4 downsampling: strided conv, a conv/pool split on a padded
/// map, concat, strided conv, pointwise conv.
pub fn hg_stem(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    mid_channels: usize,
    out_channels: usize,
) -> Result<NodeId> {
    if mid_channels < 2 || mid_channels % 2 != 0 {
        return Err(Error::invalid("hg stem", "mid_channels must be even"));
    }
    let relu = Activation::Relu;
    let s1 = conv_bn_act(b, &format!("{name}.stem1"), x, mid_channels, 3, 2, relu)?;
    let p1 = b.pad(&format!("{name}.pad1"), s1, [0, 1, 0, 1]);
    let spec2a = ConvSpec::new(mid_channels, mid_channels / 2, 2).padding(0);
    let s2a = b.conv(
        &format!("{name}.stem2a"),
        p1,
        spec2a,
        true,
        relu,
        &format!("{name}.stem2a"),
    )?;
    let p2 = b.pad(&format!("{name}.pad2"), s2a, [0, 1, 0, 1]);
    let spec2b = ConvSpec::new(mid_channels / 2, mid_channels, 2).padding(0);
    let s2b = b.conv(
        &format!("{name}.stem2b"),
        p2,
        spec2b,
        true,
        relu,
        &format!("{name}.stem2b"),
    )?;
    let pool = b.maxpool(&format!("{name}.pool"), p1, 2, 1, 0)?;
    let cat = b.concat(&format!("{name}.cat"), &[pool, s2b])?;
    let s3 = conv_bn_act(b, &format!("{name}.stem3"), cat, mid_channels, 3, 2, relu)?;
    conv_bn_act(b, &format!("{name}.stem4"), s3, out_channels, 1, 1, relu)
}

/// Aggregation block: `layer_num` chained convs whose outputs are
/// concatenated, squeezed to half the output width, then expanded.
pub fn hg_block(b: &mut GraphBuilder, name: &str, x: NodeId, spec: &HgBlockSpec) -> Result<NodeId> {
    spec.validate()?;
    if b.channels(x) != spec.in_channels {
        return Err(Error::Graph {
            edge: format!("{} -> {name}", b.layers()[x].name),
            detail: format!(
                "{} channels into block expecting {}",
                b.channels(x),
                spec.in_channels
            ),
        });
    }
    let relu = Activation::Relu;
    let mut cur = x;
    let mut ys = Vec::with_capacity(spec.layer_num);
    for i in 0..spec.layer_num {
        let lname = format!("{name}.m{i}");
        cur = if spec.use_ghost {
            let g = GhostSpec {
                cheap_kernel: spec.kernel,
                ..GhostSpec::new(b.channels(cur), spec.mid_channels)
            };
            ghost_conv(b, &lname, cur, &g, Some(relu))?
        } else {
            conv_bn_act(b, &lname, cur, spec.mid_channels, spec.kernel, 1, relu)?
        };
        ys.push(cur);
    }
    let cat = b.concat(&format!("{name}.cat"), &ys)?;
    let sq = conv_bn_act(
        b,
        &format!("{name}.squeeze"),
        cat,
        spec.out_channels / 2,
        1,
        1,
        relu,
    )?;
    let ex = conv_bn_act(
        b,
        &format!("{name}.expand"),
        sq,
        spec.out_channels,
        1,
        1,
        relu,
    )?;
    if spec.shortcut {
        b.add(&format!("{name}.add"), x, ex)
    } else {
        Ok(ex)
    }
}

/// Spatial pyramid pooling with three chained 5×5 max-pools.
pub fn sppf(b: &mut GraphBuilder, name: &str, x: NodeId, out_channels: usize) -> Result<NodeId> {
    let c = b.channels(x);
    if c < 2 || c % 2 != 0 {
        return Err(Error::invalid(
            "sppf",
            format!("input channels {c} must be even"),
        ));
    }
    let silu = Activation::Silu;
    let y0 = conv_bn_act(b, &format!("{name}.cv1"), x, c / 2, 1, 1, silu)?;
    let y1 = b.maxpool(&format!("{name}.pool1"), y0, 5, 1, 2)?;
    let y2 = b.maxpool(&format!("{name}.pool2"), y1, 5, 1, 2)?;
    let y3 = b.maxpool(&format!("{name}.pool3"), y2, 5, 1, 2)?;
    let cat = b.concat(&format!("{name}.cat"), &[y0, y1, y2, y3])?;
    conv_bn_act(b, &format!("{name}.cv2"), cat, out_channels, 1, 1, silu)
}

/// Cross-stage block with `n` two-conv bottlenecks on one half of the split.
pub fn c2f(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    out_channels: usize,
    n: usize,
    shortcut: bool,
) -> Result<NodeId> {
    if n == 0 {
        return Err(Error::invalid("c2f", "needs at least one bottleneck"));
    }
    if out_channels < 2 || out_channels % 2 != 0 {
        return Err(Error::invalid(
            "c2f",
            format!("out_channels {out_channels} must be even"),
        ));
    }
    let silu = Activation::Silu;
    let h = out_channels / 2;
    let y = conv_bn_act(b, &format!("{name}.cv1"), x, out_channels, 1, 1, silu)?;
    let a = b.slice(&format!("{name}.split0"), y, 0, h)?;
    let mut cur = b.slice(&format!("{name}.split1"), y, h, h)?;
    let mut parts = vec![a, cur];
    for i in 0..n {
        let t = conv_bn_act(b, &format!("{name}.m{i}.cv1"), cur, h, 3, 1, silu)?;
        let t = conv_bn_act(b, &format!("{name}.m{i}.cv2"), t, h, 3, 1, silu)?;
        cur = if shortcut {
            b.add(&format!("{name}.m{i}.add"), cur, t)?
        } else {
            t
        };
        parts.push(cur);
    }
    let cat = b.concat(&format!("{name}.cat"), &parts)?;
    conv_bn_act(b, &format!("{name}.cv2"), cat, out_channels, 1, 1, silu)
}

/// A stand-alone block with its own parameters.
#[derive(Clone, Debug)]
pub struct Fragment {
    graph: ModelGraph,
    params: ParamStore,
}

impl Fragment {
    /// Builds a fragment over inputs of the given channel counts.
    pub fn build(
        input_channels: &[usize],
        seed: u64,
        body: impl FnOnce(&mut GraphBuilder, &[NodeId]) -> Result<Vec<NodeId>>,
    ) -> Result<Self> {
        let mut b = GraphBuilder::new();
        let inputs: Vec<NodeId> = input_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| b.input(&format!("input{i}"), c))
            .collect();
        let outputs = body(&mut b, &inputs)?;
        let graph = b.finish(outputs);
        let params = ParamStore::init(&graph, seed);
        Ok(Self { graph, params })
    }

    /// Single-input, single-output convenience constructor.
    pub fn single(
        in_channels: usize,
        seed: u64,
        body: impl FnOnce(&mut GraphBuilder, NodeId) -> Result<NodeId>,
    ) -> Result<Self> {
        Self::build(&[in_channels], seed, |b, ins| Ok(vec![body(b, ins[0])?]))
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn forward_many(&self, inputs: &[&Tensor]) -> Result<Vec<Tensor>> {
        let mut be = Eager::new(&self.params);
        execute(
            &self.graph,
            &mut be,
            inputs.iter().map(|&t| t.clone()).collect(),
        )
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_many(&[x])?.remove(0))
    }
}

/// Ghost module applied as a bare operation with fresh weights.
pub fn ghost_conv_forward(input: &Tensor, spec: &GhostSpec, seed: u64) -> Result<Tensor> {
    let c = input.dims4()?.1;
    if c != spec.in_channels {
        return Err(Error::shape(
            "ghost_conv",
            format!("input channels {c} != spec {}", spec.in_channels),
        ));
    }
    Fragment::single(c, seed, |b, x| ghost_conv(b, "ghost", x, spec, None))?.forward(input)
}

/// Stem applied with fresh weights; spatial extents must be multiples of 4.
pub fn hg_stem_forward(
    input: &Tensor,
    mid_channels: usize,
    out_channels: usize,
    seed: u64,
) -> Result<Tensor> {
    let (_, c, h, w) = input.dims4()?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape(
            "hg_stem",
            format!("{h}x{w} not divisible by 4"),
        ));
    }
    Fragment::single(c, seed, |b, x| {
        hg_stem(b, "stem", x, mid_channels, out_channels)
    })?
    .forward(input)
}
