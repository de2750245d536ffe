//! Slow nested-loop execution that counts every multiply-accumulate.
//!
//! Used to cross-check the analytic cost model and the optimized kernels.

use crate::error::{Error, Result};
use crate::graph::{Backend, LayerSpec, ParamStore, BN_EPS};
use crate::tensor::{self, Activation, ConvSpec, Tensor};

/// Direct convolution; adds one to `macs` per multiply performed.
pub fn naive_conv2d(
    x: &Tensor<f64>,
    spec: &ConvSpec,
    weight: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    macs: &mut u64,
) -> Result<Tensor<f64>> {
    let (n, c, h, w) = x.dims4()?;
    if c != spec.in_channels {
        return Err(Error::shape(
            "naive_conv2d",
            format!("{c} != {}", spec.in_channels),
        ));
    }
    let (oh, ow) = spec.output_hw(h, w)?;
    let cg = spec.in_channels / spec.groups;
    let ng = spec.out_channels / spec.groups;
    let k = spec.kernel;
    let mut out = Tensor::zeros(&[n, spec.out_channels, oh, ow]);
    for b in 0..n {
        for o in 0..spec.out_channels {
            let g = o / ng;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |t| t.data()[o]);
                    for ci in 0..cg {
                        let ic = g * cg + ci;
                        for ky in 0..k {
                            let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                            for kx in 0..k {
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize
                                {
                                    0.0
                                } else {
                                    x.at4(b, ic, iy as usize, ix as usize)
                                };
                                acc += v * weight.at4(o, ci, ky, kx);
                                *macs += 1;
                            }
                        }
                    }
                    out.data_mut()[((b * spec.out_channels + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Graph backend over `f64` with nested-loop convolutions and a MAC counter.
pub struct Reference<'a> {
    params: &'a ParamStore,
    pub macs: u64,
    /// Per-layer MAC counts in execution order.
    pub per_layer: Vec<(String, u64)>,
}

impl<'a> Reference<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params,
            macs: 0,
            per_layer: Vec::new(),
        }
    }

    fn param(&self, name: &str) -> Result<Tensor<f64>> {
        Ok(self.params.get(name)?.cast())
    }

    fn counted<R>(&mut self, f: impl FnOnce(&mut u64) -> Result<R>) -> Result<R> {
        let mut m = 0;
        let r = f(&mut m)?;
        self.macs += m;
        if let Some(last) = self.per_layer.last_mut() {
            last.1 += m;
        }
        Ok(r)
    }
}

impl Backend for Reference<'_> {
    type Value = Tensor<f64>;

    fn begin_layer(&mut self, _id: usize, layer: &LayerSpec) {
        self.per_layer.push((layer.name.clone(), 0));
    }

    fn conv(
        &mut self,
        x: &Tensor<f64>,
        spec: &ConvSpec,
        norm: bool,
        act: Activation,
        slot: &str,
    ) -> Result<Tensor<f64>> {
        let w = self.param(&format!("{slot}.weight"))?;
        let b = if spec.bias {
            Some(self.param(&format!("{slot}.bias"))?)
        } else {
            None
        };
        let mut y = self.counted(|m| naive_conv2d(x, spec, &w, b.as_ref(), m))?;
        if norm {
            let (g, be, rm, rv) = (
                self.param(&format!("{slot}.bn.weight"))?,
                self.param(&format!("{slot}.bn.bias"))?,
                self.param(&format!("{slot}.bn.running_mean"))?,
                self.param(&format!("{slot}.bn.running_var"))?,
            );
            let (n, c, h, wd) = y.dims4()?;
            for b in 0..n {
                for ch in 0..c {
                    let inv = 1.0 / (rv.data()[ch] + BN_EPS).sqrt();
                    for i in 0..h * wd {
                        let v = &mut y.data_mut()[(b * c + ch) * h * wd + i];
                        *v = (*v - rm.data()[ch]) * inv * g.data()[ch] + be.data()[ch];
                    }
                }
            }
        }
        Ok(tensor::activate(&y, act))
    }

    fn partial_conv(
        &mut self,
        x: &Tensor<f64>,
        partial: usize,
        kernel: usize,
        slot: &str,
    ) -> Result<Tensor<f64>> {
        let c = x.dims4()?.1;
        let w = self.param(&format!("{slot}.weight"))?;
        let head = tensor::slice_channels(x, 0, partial)?;
        let spec = ConvSpec::new(partial, partial, kernel);
        let y = self.counted(|m| naive_conv2d(&head, &spec, &w, None, m))?;
        if partial == c {
            return Ok(y);
        }
        tensor::concat_channels(&[&y, &tensor::slice_channels(x, partial, c - partial)?])
    }

    fn maxpool(
        &mut self,
        x: &Tensor<f64>,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<f64>> {
        tensor::maxpool2d(x, kernel, stride, padding)
    }

    fn pad(&mut self, x: &Tensor<f64>, pads: [usize; 4]) -> Result<Tensor<f64>> {
        tensor::pad2d(x, pads, 0.0)
    }

    fn concat(&mut self, xs: &[&Tensor<f64>]) -> Result<Tensor<f64>> {
        tensor::concat_channels(xs)
    }

    fn slice(&mut self, x: &Tensor<f64>, start: usize, len: usize) -> Result<Tensor<f64>> {
        tensor::slice_channels(x, start, len)
    }

    fn add(&mut self, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
        tensor::add(a, b)
    }

    fn upsample(&mut self, x: &Tensor<f64>, factor: usize) -> Result<Tensor<f64>> {
        tensor::upsample_nearest(x, factor)
    }
}
