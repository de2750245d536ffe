use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Activation, ConvSpec};

pub type NodeId = usize;

/// Which part of the detector a layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Backbone,
    Neck,
    Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    /// Convolution, optionally followed by batch-norm, then an activation.
    Conv {
        spec: ConvSpec,
        norm: bool,
        act: Activation,
        slot: String,
        /// Constant initial bias (used for classification priors).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias_init: Option<f32>,
    },
    /// `k×k` convolution over the first `partial` channels; the rest pass through.
    PartialConv {
        channels: usize,
        partial: usize,
        kernel: usize,
        slot: String,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Zero padding `[left, right, top, bottom]`.
    Pad {
        pads: [usize; 4],
    },
    Concat,
    Slice {
        start: usize,
        len: usize,
    },
    Add,
    Upsample {
        factor: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
    /// Output channel count.
    pub channels: usize,
    pub section: Section,
    /// Enclosing block (e.g. `backbone.stage3`), used for report grouping.
    pub block: String,
}

impl LayerSpec {
    pub fn slot(&self) -> Option<&str> {
        match &self.kind {
            LayerKind::Conv { slot, .. } | LayerKind::PartialConv { slot, .. } => Some(slot),
            _ => None,
        }
    }
}

/// Shape and init information for one named weight tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotEntry {
    pub shape: Vec<usize>,
    pub init: SlotInit,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SlotInit {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Constant(f32),
}

/// Directed acyclic graph of layers in topological order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    layers: Vec<LayerSpec>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
}

impl ModelGraph {
    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, id: NodeId) -> &LayerSpec {
        &self.layers[id]
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    /// How many layers reference each weight slot.
    pub fn slot_references(&self) -> IndexMap<String, usize> {
        let mut refs = IndexMap::new();
        for l in &self.layers {
            if let Some(s) = l.slot() {
                *refs.entry(s.to_string()).or_insert(0) += 1;
            }
        }
        refs
    }

    /// Named parameter tensors in first-use order (shared slots appear once).
    pub fn param_entries(&self) -> IndexMap<String, SlotEntry> {
        let mut out = IndexMap::new();
        for l in &self.layers {
            match &l.kind {
                LayerKind::Conv {
                    spec,
                    norm,
                    slot,
                    bias_init,
                    ..
                } => {
                    if out.contains_key(&format!("{slot}.weight")) {
                        continue;
                    }
                    let fan_in = spec.in_channels / spec.groups * spec.kernel * spec.kernel;
                    out.insert(
                        format!("{slot}.weight"),
                        SlotEntry {
                            shape: spec.weight_shape().to_vec(),
                            init: SlotInit::FanIn(fan_in),
                        },
                    );
                    if spec.bias {
                        out.insert(
                            format!("{slot}.bias"),
                            SlotEntry {
                                shape: vec![spec.out_channels],
                                init: bias_init.map_or(SlotInit::FanIn(fan_in), SlotInit::Constant),
                            },
                        );
                    }
                    if *norm {
                        for (suffix, v) in [
                            ("bn.weight", 1.0),
                            ("bn.bias", 0.0),
                            ("bn.running_mean", 0.0),
                            ("bn.running_var", 1.0),
                        ] {
                            out.insert(
                                format!("{slot}.{suffix}"),
                                SlotEntry {
                                    shape: vec![spec.out_channels],
                                    init: SlotInit::Constant(v),
                                },
                            );
                        }
                    }
                }
                LayerKind::PartialConv {
                    partial,
                    kernel,
                    slot,
                    ..
                } => {
                    let key = format!("{slot}.weight");
                    if !out.contains_key(&key) {
                        out.insert(
                            key,
                            SlotEntry {
                                shape: vec![*partial, *partial, *kernel, *kernel],
                                init: SlotInit::FanIn(partial * kernel * kernel),
                            },
                        );
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Propagates `(c, h, w)` for every node given spatial input extents.
    /// Any inconsistency is reported against the offending edge.
    pub fn infer_shapes(&self, input_hw: (usize, usize)) -> Result<Vec<(usize, usize, usize)>> {
        let mut shapes: Vec<(usize, usize, usize)> = Vec::with_capacity(self.layers.len());
        for (id, l) in self.layers.iter().enumerate() {
            let ins: Vec<(usize, usize, usize)> = l.inputs.iter().map(|&i| shapes[i]).collect();
            let edge = |i: usize| format!("{} -> {}", self.layers[l.inputs[i]].name, l.name);
            let fail = |i: usize, detail: String| Error::Graph {
                edge: edge(i),
                detail,
            };
            let shape = match &l.kind {
                LayerKind::Input => (l.channels, input_hw.0, input_hw.1),
                LayerKind::Conv { spec, .. } => {
                    let (c, h, w) = ins[0];
                    if c != spec.in_channels {
                        return Err(fail(
                            0,
                            format!("{c} channels into conv expecting {}", spec.in_channels),
                        ));
                    }
                    let (oh, ow) = spec.output_hw(h, w).map_err(|e| fail(0, e.to_string()))?;
                    (spec.out_channels, oh, ow)
                }
                LayerKind::PartialConv { channels, .. } => {
                    if ins[0].0 != *channels {
                        return Err(fail(
                            0,
                            format!("{} channels into partial conv over {channels}", ins[0].0),
                        ));
                    }
                    ins[0]
                }
                LayerKind::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => {
                    let (c, h, w) = ins[0];
                    let ext = |n: usize| -> Result<usize> {
                        if n + 2 * padding < *kernel {
                            return Err(fail(
                                0,
                                format!("pool window {kernel} exceeds padded extent"),
                            ));
                        }
                        Ok((n + 2 * padding - kernel) / stride + 1)
                    };
                    (c, ext(h)?, ext(w)?)
                }
                LayerKind::Pad { pads } => {
                    let (c, h, w) = ins[0];
                    (c, h + pads[2] + pads[3], w + pads[0] + pads[1])
                }
                LayerKind::Concat => {
                    let (_, h, w) = ins[0];
                    for (i, s) in ins.iter().enumerate() {
                        if (s.1, s.2) != (h, w) {
                            return Err(fail(
                                i,
                                format!("spatial {}x{} does not match {}x{}", s.1, s.2, h, w),
                            ));
                        }
                    }
                    (ins.iter().map(|s| s.0).sum(), h, w)
                }
                LayerKind::Slice { start, len } => {
                    if start + len > ins[0].0 {
                        return Err(fail(
                            0,
                            format!("slice {start}+{len} exceeds {} channels", ins[0].0),
                        ));
                    }
                    (*len, ins[0].1, ins[0].2)
                }
                LayerKind::Add => {
                    if ins[0] != ins[1] {
                        return Err(fail(1, format!("add of {:?} and {:?}", ins[0], ins[1])));
                    }
                    ins[0]
                }
                LayerKind::Upsample { factor } => (ins[0].0, ins[0].1 * factor, ins[0].2 * factor),
            };
            debug_assert_eq!(shape.0, l.channels, "layer {id} channel bookkeeping");
            shapes.push(shape);
        }
        Ok(shapes)
    }
}

/// Incrementally assembles a [`ModelGraph`], checking channel counts per edge.
#[derive(Debug)]
pub struct GraphBuilder {
    layers: Vec<LayerSpec>,
    inputs: Vec<NodeId>,
    section: Section,
    block: String,
}

impl Default for GraphBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self {
            layers: Vec::new(),
            inputs: Vec::new(),
            section: Section::Backbone,
            block: String::new(),
        }
    }

    pub fn set_section(&mut self, section: Section) {
        self.section = section;
    }

    pub fn set_block(&mut self, block: impl Into<String>) {
        self.block = block.into();
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.layers[id].channels
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    fn push(
        &mut self,
        name: String,
        kind: LayerKind,
        inputs: Vec<NodeId>,
        channels: usize,
    ) -> NodeId {
        self.layers.push(LayerSpec {
            name,
            kind,
            inputs,
            channels,
            section: self.section,
            block: self.block.clone(),
        });
        self.layers.len() - 1
    }

    fn edge_err(&self, from: NodeId, to: &str, detail: String) -> Error {
        Error::Graph {
            edge: format!("{} -> {to}", self.layers[from].name),
            detail,
        }
    }

    pub fn input(&mut self, name: &str, channels: usize) -> NodeId {
        let id = self.push(name.to_string(), LayerKind::Input, vec![], channels);
        self.inputs.push(id);
        id
    }

    /// Convolution with an explicit slot name (identical slots share weights).
    pub fn conv(
        &mut self,
        name: &str,
        x: NodeId,
        spec: ConvSpec,
        norm: bool,
        act: Activation,
        slot: &str,
    ) -> Result<NodeId> {
        self.conv_with_bias_init(name, x, spec, norm, act, slot, None)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_with_bias_init(
        &mut self,
        name: &str,
        x: NodeId,
        spec: ConvSpec,
        norm: bool,
        act: Activation,
        slot: &str,
        bias_init: Option<f32>,
    ) -> Result<NodeId> {
        spec.validate()
            .map_err(|e| self.edge_err(x, name, e.to_string()))?;
        if self.channels(x) != spec.in_channels {
            return Err(self.edge_err(
                x,
                name,
                format!(
                    "{} channels into conv expecting {}",
                    self.channels(x),
                    spec.in_channels
                ),
            ));
        }
        let kind = LayerKind::Conv {
            spec,
            norm,
            act,
            slot: slot.to_string(),
            bias_init,
        };
        self.check_shared(name, &kind)?;
        Ok(self.push(name.to_string(), kind, vec![x], spec.out_channels))
    }

    /// Shared slots must be referenced by identical layer definitions.
    fn check_shared(&self, name: &str, kind: &LayerKind) -> Result<()> {
        let slot = match kind {
            LayerKind::Conv { slot, .. } | LayerKind::PartialConv { slot, .. } => slot,
            _ => return Ok(()),
        };
        if let Some(prev) = self.layers.iter().find(|l| l.slot() == Some(slot)) {
            if &prev.kind != kind {
                return Err(Error::Graph {
                    edge: format!("{} ~ {name}", prev.name),
                    detail: format!("slot {slot} shared by layers with different definitions"),
                });
            }
        }
        Ok(())
    }

    pub fn partial_conv(
        &mut self,
        name: &str,
        x: NodeId,
        partial: usize,
        kernel: usize,
        slot: &str,
    ) -> Result<NodeId> {
        let channels = self.channels(x);
        if partial == 0 || partial > channels || kernel % 2 == 0 {
            return Err(self.edge_err(
                x,
                name,
                format!("partial conv over {partial}/{channels} channels with kernel {kernel}"),
            ));
        }
        let kind = LayerKind::PartialConv {
            channels,
            partial,
            kernel,
            slot: slot.to_string(),
        };
        self.check_shared(name, &kind)?;
        Ok(self.push(name.to_string(), kind, vec![x], channels))
    }

    pub fn maxpool(
        &mut self,
        name: &str,
        x: NodeId,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        if kernel == 0 || stride == 0 || padding >= kernel {
            return Err(self.edge_err(
                x,
                name,
                format!("bad pool k={kernel} s={stride} p={padding}"),
            ));
        }
        let c = self.channels(x);
        Ok(self.push(
            name.to_string(),
            LayerKind::MaxPool {
                kernel,
                stride,
                padding,
            },
            vec![x],
            c,
        ))
    }

    pub fn pad(&mut self, name: &str, x: NodeId, pads: [usize; 4]) -> NodeId {
        let c = self.channels(x);
        self.push(name.to_string(), LayerKind::Pad { pads }, vec![x], c)
    }

    pub fn concat(&mut self, name: &str, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::invalid("concat", format!("{name}: no inputs")));
        }
        let c = xs.iter().map(|&i| self.channels(i)).sum();
        Ok(self.push(name.to_string(), LayerKind::Concat, xs.to_vec(), c))
    }

    pub fn slice(&mut self, name: &str, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        if start + len > self.channels(x) || len == 0 {
            return Err(self.edge_err(
                x,
                name,
                format!("slice {start}+{len} of {}", self.channels(x)),
            ));
        }
        Ok(self.push(
            name.to_string(),
            LayerKind::Slice { start, len },
            vec![x],
            len,
        ))
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.channels(a) != self.channels(b) {
            return Err(self.edge_err(
                b,
                name,
                format!(
                    "add of {} and {} channels",
                    self.channels(a),
                    self.channels(b)
                ),
            ));
        }
        let c = self.channels(a);
        Ok(self.push(name.to_string(), LayerKind::Add, vec![a, b], c))
    }

    pub fn upsample(&mut self, name: &str, x: NodeId, factor: usize) -> NodeId {
        let c = self.channels(x);
        self.push(name.to_string(), LayerKind::Upsample { factor }, vec![x], c)
    }

    pub fn finish(self, outputs: Vec<NodeId>) -> ModelGraph {
        ModelGraph {
            layers: self.layers,
            inputs: self.inputs,
            outputs,
        }
    }
}
