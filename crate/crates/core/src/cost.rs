//! Analytic parameter and multiply-accumulate accounting.
//!
//! Counts are MACs; reported FLOPs are `2 × MACs`. Batch-norm, activations and
//! residual adds are tallied separately as elementwise operations.

use std::collections::HashSet;
use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{LayerKind, ModelGraph, Section};
use crate::nn::{GhostSpec, HgBlockSpec};
use crate::tensor::ConvSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub params: u64,
    pub macs: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            params: self.params + o.params,
            macs: self.macs + o.macs,
        }
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}

/// Convolution weights (+bias) and MACs for an `out_h × out_w` output.
pub fn conv_cost(spec: &ConvSpec, out_h: usize, out_w: usize) -> Cost {
    let per_out = (spec.in_channels / spec.groups * spec.kernel * spec.kernel) as u64;
    let n = spec.out_channels as u64;
    Cost {
        params: n * per_out + if spec.bias { n } else { 0 },
        macs: n * (out_h * out_w) as u64 * per_out,
    }
}

/// Parameters of a batch-norm over `channels` (scale and shift).
pub fn bn_params(channels: usize) -> u64 {
    2 * channels as u64
}

/// MACs of the Ghost module: primary conv plus cheap grouped conv.
pub fn ghost_cost(spec: &GhostSpec, out_h: usize, out_w: usize) -> u64 {
    let hw = (out_h * out_w) as u64;
    let m = spec.primary_channels() as u64;
    let c = spec.in_channels as u64;
    let (kp, d, s) = (
        spec.primary_kernel as u64,
        spec.cheap_kernel as u64,
        spec.ratio as u64,
    );
    m * hw * c * kp * kp + (s - 1) * hw * m * d * d
}

/// Speed-up of the Ghost module over a dense conv with the primary kernel,
/// `s·c·k² / (c·k² + (s−1)·d²)`.
pub fn ghost_ratio(spec: &GhostSpec) -> Ratio<u64> {
    let (c, s) = (spec.in_channels as u64, spec.ratio as u64);
    let k2 = (spec.primary_kernel * spec.primary_kernel) as u64;
    let d2 = (spec.cheap_kernel * spec.cheap_kernel) as u64;
    Ratio::new(s * c * k2, c * k2 + (s - 1) * d2)
}

/// The dense convolution a Ghost module stands in for.
pub fn ghost_equivalent_conv(spec: &GhostSpec) -> ConvSpec {
    ConvSpec::new(spec.in_channels, spec.out_channels, spec.primary_kernel)
}

/// Partial convolution over `partial` of the channels.
pub fn pconv_cost(partial: usize, kernel: usize, h: usize, w: usize) -> Cost {
    let per = (partial * partial * kernel * kernel) as u64;
    Cost {
        params: per,
        macs: per * (h * w) as u64,
    }
}

fn cba(c_in: usize, c_out: usize, k: usize, h: usize, w: usize) -> Cost {
    let c = conv_cost(&ConvSpec::new(c_in, c_out, k), h, w);
    Cost {
        params: c.params + bn_params(c_out),
        macs: c.macs,
    }
}

/// Aggregation block at stride 1 on an `h × w` map (batch-norm included in params).
pub fn hg_block_cost(spec: &HgBlockSpec, h: usize, w: usize) -> Cost {
    let mut total = Cost::default();
    let mut c = spec.in_channels;
    for _ in 0..spec.layer_num {
        total = total
            + if spec.use_ghost {
                let g = GhostSpec {
                    cheap_kernel: spec.kernel,
                    ..GhostSpec::new(c, spec.mid_channels)
                };
                let m = g.primary_channels();
                let cheap = g.cheap_channels();
                Cost {
                    params: (c * m) as u64
                        + bn_params(m)
                        + (cheap * spec.kernel * spec.kernel) as u64
                        + bn_params(cheap),
                    macs: ghost_cost(&g, h, w),
                }
            } else {
                cba(c, spec.mid_channels, spec.kernel, h, w)
            };
        c = spec.mid_channels;
    }
    total
        + cba(spec.concat_channels(), spec.out_channels / 2, 1, h, w)
        + cba(spec.out_channels / 2, spec.out_channels, 1, h, w)
}

pub fn sppf_cost(c_in: usize, c_out: usize, h: usize, w: usize) -> Cost {
    let half = c_in / 2;
    cba(c_in, half, 1, h, w) + cba(4 * half, c_out, 1, h, w)
}

pub fn c2f_cost(c_in: usize, c_out: usize, n: usize, h: usize, w: usize) -> Cost {
    let half = c_out / 2;
    let bottleneck = cba(half, half, 3, h, w) + cba(half, half, 3, h, w);
    cba(c_in, c_out, 1, h, w)
        + (0..n).map(|_| bottleneck).sum::<Cost>()
        + cba((2 + n) * half, c_out, 1, h, w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    pub kind: String,
    pub section: Section,
    pub block: String,
    pub output: [usize; 3],
    /// Zero when the layer reuses an already counted weight slot.
    pub params: u64,
    pub macs: u64,
    /// Batch-norm, activation and add operations.
    pub elementwise: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub input_size: [usize; 2],
    pub rows: Vec<CostRow>,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    pub gflops: f64,
    pub elementwise: u64,
    pub backbone_macs: u64,
    pub neck_macs: u64,
    pub head_macs: u64,
    pub head_params: u64,
    pub head_share: f64,
}

/// Walks the graph with propagated shapes and tallies every layer.
pub fn model_cost_report(graph: &ModelGraph, input_hw: (usize, usize)) -> Result<CostReport> {
    let shapes = graph.infer_shapes(input_hw)?;
    let mut seen: HashSet<&str> = HashSet::new();
    let mut rows = Vec::new();
    for (id, l) in graph.layers().iter().enumerate() {
        let (c, h, w) = shapes[id];
        let plane = (c * h * w) as u64;
        let (kind, cost, elementwise) = match &l.kind {
            LayerKind::Input => continue,
            LayerKind::Conv {
                spec, norm, act, ..
            } => {
                let mut cost = conv_cost(spec, h, w);
                if *norm {
                    cost.params += bn_params(spec.out_channels);
                }
                let ew =
                    plane * (*norm as u64 + (*act != crate::tensor::Activation::Identity) as u64);
                let kind = if spec.groups == 1 {
                    format!("conv{}x{}", spec.kernel, spec.kernel)
                } else {
                    format!("gconv{}x{}/{}", spec.kernel, spec.kernel, spec.groups)
                };
                (kind, cost, ew)
            }
            LayerKind::PartialConv {
                partial, kernel, ..
            } => (
                format!("pconv{kernel}x{kernel}"),
                pconv_cost(*partial, *kernel, h, w),
                0,
            ),
            LayerKind::MaxPool { kernel, .. } => (format!("maxpool{kernel}"), Cost::default(), 0),
            LayerKind::Pad { .. } => ("pad".into(), Cost::default(), 0),
            LayerKind::Concat => ("concat".into(), Cost::default(), 0),
            LayerKind::Slice { .. } => ("slice".into(), Cost::default(), 0),
            LayerKind::Add => ("add".into(), Cost::default(), plane),
            LayerKind::Upsample { .. } => ("upsample".into(), Cost::default(), 0),
        };
        let params = match l.slot() {
            Some(slot) if !seen.insert(slot) => 0,
            _ => cost.params,
        };
        rows.push(CostRow {
            name: l.name.clone(),
            kind,
            section: l.section,
            block: l.block.clone(),
            output: [c, h, w],
            params,
            macs: cost.macs,
            elementwise,
        });
    }
    Ok(CostReport::from_rows(input_hw, rows))
}

impl CostReport {
    pub fn from_rows(input_hw: (usize, usize), rows: Vec<CostRow>) -> Self {
        let sum = |f: &dyn Fn(&CostRow) -> u64| rows.iter().map(f).sum::<u64>();
        let in_section = |s: Section| sum(&|r: &CostRow| if r.section == s { r.macs } else { 0 });
        let macs = sum(&|r| r.macs);
        let head_macs = in_section(Section::Head);
        let backbone_macs = in_section(Section::Backbone);
        let neck_macs = in_section(Section::Neck);
        let head_params = sum(&|r| {
            if r.section == Section::Head {
                r.params
            } else {
                0
            }
        });
        Self {
            input_size: [input_hw.0, input_hw.1],
            params: sum(&|r| r.params),
            elementwise: sum(&|r| r.elementwise),
            flops: 2 * macs,
            gflops: 2.0 * macs as f64 / 1e9,
            macs,
            backbone_macs,
            neck_macs,
            head_macs,
            head_params,
            head_share: if macs == 0 {
                0.0
            } else {
                head_macs as f64 / macs as f64
            },
            rows,
        }
    }

    /// Aligned text table followed by section totals.
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(4)
            .max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:<14}  {:>16}  {:>12}  {:>14}",
            "layer", "kind", "output", "params", "MACs"
        );
        for r in &self.rows {
            let out = format!("{}x{}x{}", r.output[0], r.output[1], r.output[2]);
            let _ = writeln!(
                s,
                "{:<width$}  {:<14}  {:>16}  {:>12}  {:>14}",
                r.name, r.kind, out, r.params, r.macs
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "input          {}x{}",
            self.input_size[0], self.input_size[1]
        );
        let _ = writeln!(
            s,
            "params         {} ({:.3} M)",
            self.params,
            self.params as f64 / 1e6
        );
        let _ = writeln!(
            s,
            "MACs           {} ({:.3} G)",
            self.macs,
            self.macs as f64 / 1e9
        );
        let _ = writeln!(
            s,
            "FLOPs (2xMAC)  {} ({:.2} GFLOPs)",
            self.flops, self.gflops
        );
        let _ = writeln!(s, "elementwise    {}", self.elementwise);
        for (name, m) in [
            ("backbone", self.backbone_macs),
            ("neck", self.neck_macs),
            ("head", self.head_macs),
        ] {
            let share = if self.macs == 0 {
                0.0
            } else {
                100.0 * m as f64 / self.macs as f64
            };
            let _ = writeln!(s, "{name:<14} {m} MACs ({share:.1}%)");
        }
        s
    }
}
