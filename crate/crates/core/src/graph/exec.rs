use indexmap::IndexMap;

use super::ir::{LayerKind, LayerSpec, ModelGraph};
use super::params::ParamStore;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Activation, BatchNormRefs, ConvSpec, Element, Tensor};

/// Batch-norm epsilon used by every normalized convolution.
pub const BN_EPS: f64 = 1e-3;
/// Running-statistics update rate during training.
pub const BN_MOMENTUM: f64 = 0.03;

/// Primitive operations a graph can be lowered onto.
pub trait Backend {
    type Value;

    /// Called before each layer executes.
    fn begin_layer(&mut self, _id: usize, _layer: &LayerSpec) {}

    fn conv(
        &mut self,
        x: &Self::Value,
        spec: &ConvSpec,
        norm: bool,
        act: Activation,
        slot: &str,
    ) -> Result<Self::Value>;
    fn partial_conv(
        &mut self,
        x: &Self::Value,
        partial: usize,
        kernel: usize,
        slot: &str,
    ) -> Result<Self::Value>;
    fn maxpool(
        &mut self,
        x: &Self::Value,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self::Value>;
    fn pad(&mut self, x: &Self::Value, pads: [usize; 4]) -> Result<Self::Value>;
    fn concat(&mut self, xs: &[&Self::Value]) -> Result<Self::Value>;
    fn slice(&mut self, x: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn upsample(&mut self, x: &Self::Value, factor: usize) -> Result<Self::Value>;
}

/// Runs `graph` on `backend`, releasing intermediates after their last use.
pub fn execute<B: Backend>(
    graph: &ModelGraph,
    backend: &mut B,
    inputs: Vec<B::Value>,
) -> Result<Vec<B::Value>>
where
    B::Value: Clone,
{
    if inputs.len() != graph.inputs().len() {
        return Err(Error::invalid(
            "graph inputs",
            format!("expected {}, got {}", graph.inputs().len(), inputs.len()),
        ));
    }
    let layers = graph.layers();
    let mut last_use = vec![0usize; layers.len()];
    for (id, l) in layers.iter().enumerate() {
        for &i in &l.inputs {
            last_use[i] = id;
        }
    }
    for &o in graph.outputs() {
        last_use[o] = usize::MAX;
    }
    let mut values: Vec<Option<B::Value>> = (0..layers.len()).map(|_| None).collect();
    for (&id, v) in graph.inputs().iter().zip(inputs) {
        values[id] = Some(v);
    }
    for (id, l) in layers.iter().enumerate() {
        if matches!(l.kind, LayerKind::Input) {
            continue;
        }
        backend.begin_layer(id, l);
        let ins: Vec<&B::Value> = l
            .inputs
            .iter()
            .map(|&i| values[i].as_ref().expect("topological order"))
            .collect();
        let out = run_layer(backend, l, &ins).map_err(|e| match e {
            Error::Shape { op, detail } => Error::Graph {
                edge: format!("{} -> {}", layers[l.inputs[0]].name, l.name),
                detail: format!("{op}: {detail}"),
            },
            other => other,
        })?;
        values[id] = Some(out);
        for &i in &l.inputs {
            if last_use[i] == id {
                values[i] = None;
            }
        }
    }
    Ok(graph
        .outputs()
        .iter()
        .map(|&o| values[o].clone().expect("outputs retained"))
        .collect())
}

fn run_layer<B: Backend>(b: &mut B, l: &LayerSpec, ins: &[&B::Value]) -> Result<B::Value> {
    match &l.kind {
        LayerKind::Input => unreachable!("inputs are seeded"),
        LayerKind::Conv {
            spec,
            norm,
            act,
            slot,
            ..
        } => b.conv(ins[0], spec, *norm, *act, slot),
        LayerKind::PartialConv {
            partial,
            kernel,
            slot,
            ..
        } => b.partial_conv(ins[0], *partial, *kernel, slot),
        LayerKind::MaxPool {
            kernel,
            stride,
            padding,
        } => b.maxpool(ins[0], *kernel, *stride, *padding),
        LayerKind::Pad { pads } => b.pad(ins[0], *pads),
        LayerKind::Concat => b.concat(ins),
        LayerKind::Slice { start, len } => b.slice(ins[0], *start, *len),
        LayerKind::Add => b.add(ins[0], ins[1]),
        LayerKind::Upsample { factor } => b.upsample(ins[0], *factor),
    }
}

/// Inference on plain tensors with batch-norm folded into a per-channel affine.
pub struct Eager<'a> {
    params: &'a ParamStore,
}

impl<'a> Eager<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self { params }
    }
}

impl Backend for Eager<'_> {
    type Value = Tensor<f32>;

    fn conv(
        &mut self,
        x: &Tensor,
        spec: &ConvSpec,
        norm: bool,
        act: Activation,
        slot: &str,
    ) -> Result<Tensor> {
        let p = self.params;
        let w = p.get(&format!("{slot}.weight"))?;
        let bias = if spec.bias {
            Some(p.get(&format!("{slot}.bias"))?)
        } else {
            None
        };
        let mut y = tensor::conv2d(x, spec, w, bias)?;
        if norm {
            let bn = BatchNormRefs {
                gamma: p.get(&format!("{slot}.bn.weight"))?.data(),
                beta: p.get(&format!("{slot}.bn.bias"))?.data(),
                running_mean: p.get(&format!("{slot}.bn.running_mean"))?.data(),
                running_var: p.get(&format!("{slot}.bn.running_var"))?.data(),
                eps: BN_EPS,
            };
            let (scale, shift) = bn.folded();
            let (_, c, h, w) = y.dims4()?;
            let plane = h * w;
            for (i, chunk) in y.data_mut().chunks_mut(plane.max(1)).enumerate() {
                let ch = i % c;
                for v in chunk {
                    *v = act.apply(*v * scale[ch] + shift[ch]);
                }
            }
            Ok(y)
        } else if act == Activation::Identity {
            Ok(y)
        } else {
            y.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            Ok(y)
        }
    }

    fn partial_conv(
        &mut self,
        x: &Tensor,
        partial: usize,
        kernel: usize,
        slot: &str,
    ) -> Result<Tensor> {
        let c = x.dims4()?.1;
        let w = self.params.get(&format!("{slot}.weight"))?;
        let head = tensor::slice_channels(x, 0, partial)?;
        let y = tensor::conv2d(&head, &ConvSpec::new(partial, partial, kernel), w, None)?;
        if partial == c {
            return Ok(y);
        }
        let rest = tensor::slice_channels(x, partial, c - partial)?;
        tensor::concat_channels(&[&y, &rest])
    }

    fn maxpool(
        &mut self,
        x: &Tensor,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        tensor::maxpool2d(x, kernel, stride, padding)
    }

    fn pad(&mut self, x: &Tensor, pads: [usize; 4]) -> Result<Tensor> {
        tensor::pad2d(x, pads, 0.0)
    }

    fn concat(&mut self, xs: &[&Tensor]) -> Result<Tensor> {
        tensor::concat_channels(xs)
    }

    fn slice(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        tensor::slice_channels(x, start, len)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::add(a, b)
    }

    fn upsample(&mut self, x: &Tensor, factor: usize) -> Result<Tensor> {
        tensor::upsample_nearest(x, factor)
    }
}

/// How batch-norm behaves on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running estimates are collected for a later update.
    Train,
    /// Running statistics (inference form), still differentiable in γ and β.
    Frozen,
}

/// Batch statistics observed for one normalized layer during a forward pass.
#[derive(Clone, Debug)]
pub struct BnObservation<T> {
    pub slot: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of elements per channel the statistics were computed over.
    pub count: usize,
}

/// Records a differentiable forward pass. Each parameter becomes a single
/// leaf, so layers sharing a slot accumulate into the same gradient.
pub struct Taped<'a, T: Element = f32> {
    pub tape: Tape<T>,
    params: &'a ParamStore,
    leaves: IndexMap<String, Var>,
    mode: BnMode,
    observations: Vec<BnObservation<T>>,
}

impl<'a, T: Element> Taped<'a, T> {
    pub fn new(params: &'a ParamStore, mode: BnMode) -> Self {
        Self {
            tape: Tape::new(),
            params,
            leaves: IndexMap::new(),
            mode,
            observations: Vec::new(),
        }
    }

    fn param(&mut self, name: String) -> Result<Var> {
        if let Some(&v) = self.leaves.get(&name) {
            return Ok(v);
        }
        let v = self.tape.leaf(self.params.get(&name)?.cast());
        self.leaves.insert(name, v);
        Ok(v)
    }

    /// Parameter leaves created so far, by name.
    pub fn leaves(&self) -> &IndexMap<String, Var> {
        &self.leaves
    }

    pub fn observations(&self) -> &[BnObservation<T>] {
        &self.observations
    }
}

impl<T: Element> Backend for Taped<'_, T> {
    type Value = Var;

    fn conv(
        &mut self,
        x: &Var,
        spec: &ConvSpec,
        norm: bool,
        act: Activation,
        slot: &str,
    ) -> Result<Var> {
        let w = self.param(format!("{slot}.weight"))?;
        let b = if spec.bias {
            Some(self.param(format!("{slot}.bias"))?)
        } else {
            None
        };
        let mut y = self.tape.conv2d(*x, w, b, *spec)?;
        if norm {
            let gamma = self.param(format!("{slot}.bn.weight"))?;
            let beta = self.param(format!("{slot}.bn.bias"))?;
            match self.mode {
                BnMode::Train => {
                    let (n, _, h, wd) = self.tape.value(y).dims4()?;
                    let (out, mean, var) = self.tape.batch_norm_train(y, gamma, beta, BN_EPS)?;
                    self.observations.push(BnObservation {
                        slot: slot.to_string(),
                        mean,
                        var,
                        count: n * h * wd,
                    });
                    y = out;
                }
                BnMode::Frozen => {
                    let rm: Vec<T> = self
                        .params
                        .get(&format!("{slot}.bn.running_mean"))?
                        .cast()
                        .into_data();
                    let rv: Vec<T> = self
                        .params
                        .get(&format!("{slot}.bn.running_var"))?
                        .cast()
                        .into_data();
                    y = self.tape.batch_norm(y, gamma, beta, &rm, &rv, BN_EPS)?;
                }
            }
        }
        if act != Activation::Identity {
            y = self.tape.activation(y, act)?;
        }
        Ok(y)
    }

    fn partial_conv(&mut self, x: &Var, partial: usize, kernel: usize, slot: &str) -> Result<Var> {
        let c = self.tape.value(*x).dims4()?.1;
        let w = self.param(format!("{slot}.weight"))?;
        let head = self.tape.slice(*x, 0, partial)?;
        let y = self
            .tape
            .conv2d(head, w, None, ConvSpec::new(partial, partial, kernel))?;
        if partial == c {
            return Ok(y);
        }
        let rest = self.tape.slice(*x, partial, c - partial)?;
        self.tape.concat(&[y, rest])
    }

    fn maxpool(&mut self, x: &Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        self.tape.maxpool2d(*x, kernel, stride, padding)
    }

    fn pad(&mut self, x: &Var, pads: [usize; 4]) -> Result<Var> {
        self.tape.pad2d(*x, pads, 0.0)
    }

    fn concat(&mut self, xs: &[&Var]) -> Result<Var> {
        let vs: Vec<Var> = xs.iter().map(|&&v| v).collect();
        self.tape.concat(&vs)
    }

    fn slice(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        self.tape.slice(*x, start, len)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }

    fn upsample(&mut self, x: &Var, factor: usize) -> Result<Var> {
        self.tape.upsample(*x, factor)
    }
}

/// Applies collected batch statistics to the running estimates
/// (`running = (1 - m)·running + m·batch`, variance unbiased).
pub fn update_running_stats<T: Element>(
    params: &mut ParamStore,
    observations: &[BnObservation<T>],
    momentum: f64,
) -> Result<()> {
    for obs in observations {
        let unbias = if obs.count > 1 {
            obs.count as f64 / (obs.count - 1) as f64
        } else {
            1.0
        };
        let rm = params.get_mut(&format!("{}.bn.running_mean", obs.slot))?;
        for (r, m) in rm.data_mut().iter_mut().zip(&obs.mean) {
            *r = ((1.0 - momentum) * *r as f64 + momentum * m.as_f64()) as f32;
        }
        let rv = params.get_mut(&format!("{}.bn.running_var", obs.slot))?;
        for (r, v) in rv.data_mut().iter_mut().zip(&obs.var) {
            *r = ((1.0 - momentum) * *r as f64 + momentum * v.as_f64() * unbias) as f32;
        }
    }
    Ok(())
}
