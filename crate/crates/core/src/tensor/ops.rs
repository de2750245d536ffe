//! Shape plumbing, elementwise activations, batch-norm and resampling.

use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Concatenates NCHW tensors along the channel axis, preserving input order.
pub fn concat_channels<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total = 0;
    for (i, t) in inputs.iter().enumerate() {
        let (tn, tc, th, tw) = t.dims4()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("input #{i} has (N,h,w)=({tn},{th},{tw}) but input #0 has ({n},{h},{w})"),
            ));
        }
        total += tc;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total * plane);
    for b in 0..n {
        for t in inputs {
            let c = t.shape()[1];
            data.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Tensor::new(vec![n, total, h, w], data)
}

/// Channels `start..start + len` of an NCHW tensor.
pub fn slice_channels<T: Element>(
    input: &Tensor<T>,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if start + len > c {
        return Err(Error::shape(
            "slice_channels",
            format!("range {start}..{} exceeds {c} channels", start + len),
        ));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * len * plane);
    for b in 0..n {
        let off = (b * c + start) * plane;
        data.extend_from_slice(&input.data()[off..off + len * plane]);
    }
    Tensor::new(vec![n, len, h, w], data)
}

/// Splits at the given channel widths; the inverse of [`concat_channels`].
pub fn split_channels<T: Element>(input: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let c = input.dims4()?.1;
    if widths.iter().sum::<usize>() != c {
        return Err(Error::shape(
            "split_channels",
            format!("widths {widths:?} do not sum to {c}"),
        ));
    }
    let mut start = 0;
    widths
        .iter()
        .map(|&len| {
            let s = slice_channels(input, start, len);
            start += len;
            s
        })
        .collect()
}

/// Adds `grad` into channels `start..` of a zero tensor shaped like the slice source.
pub fn unslice_channels<T: Element>(
    grad: &Tensor<T>,
    source_shape: &[usize],
    start: usize,
) -> Tensor<T> {
    let (n, c, h, w) = (
        source_shape[0],
        source_shape[1],
        source_shape[2],
        source_shape[3],
    );
    let len = grad.shape()[1];
    let plane = h * w;
    let mut out = Tensor::zeros(source_shape);
    for b in 0..n {
        let dst = (b * c + start) * plane;
        out.data_mut()[dst..dst + len * plane]
            .copy_from_slice(&grad.data()[b * len * plane..(b + 1) * len * plane]);
    }
    out
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

/// Zero (or constant) padding with independent left/right/top/bottom widths.
pub fn pad2d<T: Element>(input: &Tensor<T>, pads: [usize; 4], value: T) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let [l, r, t, b] = pads;
    let (oh, ow) = (h + t + b, w + l + r);
    let mut out = Tensor::full(&[n, c, oh, ow], value);
    for p in 0..n * c {
        for y in 0..h {
            let src = &input.data()[(p * h + y) * w..][..w];
            let dst = (p * oh + y + t) * ow + l;
            out.data_mut()[dst..dst + w].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Crops the gradient of [`pad2d`] back to the unpadded extents.
pub fn pad2d_backward<T: Element>(grad: &Tensor<T>, pads: [usize; 4]) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = grad.dims4()?;
    let [l, r, t, b] = pads;
    let (h, w) = (oh - t - b, ow - l - r);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for p in 0..n * c {
        for y in 0..h {
            let src = (p * oh + y + t) * ow + l;
            out.data_mut()[(p * h + y) * w..][..w].copy_from_slice(&grad.data()[src..src + w]);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Silu,
    Sigmoid,
}

fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl Activation {
    pub fn apply<T: Element>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative at `x` (input) given `y` (output). ReLU'(0) is 0.
    pub fn derivative<T: Element>(self, x: T, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

pub fn activate<T: Element>(input: &Tensor<T>, act: Activation) -> Tensor<T> {
    if act == Activation::Identity {
        return input.clone();
    }
    input.map(|v| act.apply(v))
}

pub fn activate_backward<T: Element>(
    input: &Tensor<T>,
    output: &Tensor<T>,
    grad: &Tensor<T>,
    act: Activation,
) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(output.data())
        .zip(grad.data())
        .map(|((&x, &y), &g)| g * act.derivative(x, y))
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

/// Per-channel affine map `y = x·scale[c] + shift[c]`.
pub fn channel_affine<T: Element>(
    input: &Tensor<T>,
    scale: &[T],
    shift: &[T],
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if scale.len() != c || shift.len() != c {
        return Err(Error::shape(
            "channel_affine",
            format!(
                "{c} channels but {} scales / {} shifts",
                scale.len(),
                shift.len()
            ),
        ));
    }
    let plane = h * w;
    let mut out = input.clone();
    for (i, chunk) in out
        .data_mut()
        .chunks_mut(plane.max(1))
        .enumerate()
        .take(n * c)
    {
        let ch = i % c;
        for v in chunk {
            *v = *v * scale[ch] + shift[ch];
        }
    }
    Ok(out)
}

/// Batch-norm parameters for one layer.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormRefs<'a, T> {
    pub gamma: &'a [T],
    pub beta: &'a [T],
    pub running_mean: &'a [T],
    pub running_var: &'a [T],
    pub eps: f64,
}

impl<T: Element> BatchNormRefs<'_, T> {
    /// Folded inference-form `(scale, shift)`.
    pub fn folded(&self) -> (Vec<T>, Vec<T>) {
        let eps = T::from_f64(self.eps);
        let scale: Vec<T> = self
            .gamma
            .iter()
            .zip(self.running_var)
            .map(|(&g, &v)| g / (v + eps).sqrt())
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(self.running_mean)
            .zip(&scale)
            .map(|((&b, &m), &s)| b - m * s)
            .collect();
        (scale, shift)
    }
}

pub fn batch_norm_inference<T: Element>(
    input: &Tensor<T>,
    bn: &BatchNormRefs<'_, T>,
) -> Result<Tensor<T>> {
    let (scale, shift) = bn.folded();
    channel_affine(input, &scale, &shift)
}

/// Output of a training-mode batch-norm forward pass.
pub struct BatchNormTrain<T> {
    pub output: Tensor<T>,
    pub normalized: Tensor<T>,
    pub batch_mean: Vec<T>,
    /// Biased batch variance.
    pub batch_var: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Normalizes with per-channel batch statistics over (N, h, w).
pub fn batch_norm_train<T: Element>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<BatchNormTrain<T>> {
    let (n, c, h, w) = input.dims4()?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "batch_norm_train",
            format!("{c} channels vs {} gammas", gamma.len()),
        ));
    }
    let plane = h * w;
    let count = T::from_f64((n * plane) as f64);
    let x = input.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let s: T = x[(b * c + ch) * plane..][..plane].iter().copied().sum();
            mean[ch] = mean[ch] + s;
        }
    }
    for m in &mut mean {
        *m = *m / count;
    }
    for b in 0..n {
        for ch in 0..c {
            let m = mean[ch];
            let s: T = x[(b * c + ch) * plane..][..plane]
                .iter()
                .map(|&v| (v - m) * (v - m))
                .sum();
            var[ch] = var[ch] + s;
        }
    }
    for v in &mut var {
        *v = *v / count;
    }
    let eps_t = T::from_f64(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
    let mut normalized = input.clone();
    let mut output = input.clone();
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                normalized.data_mut()[i] = xh;
                output.data_mut()[i] = xh * gamma[ch] + beta[ch];
            }
        }
    }
    Ok(BatchNormTrain {
        output,
        normalized,
        batch_mean: mean,
        batch_var: var,
        inv_std,
    })
}

/// Gradients of training-mode batch-norm: `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward<T: Element>(
    normalized: &Tensor<T>,
    inv_std: &[T],
    gamma: &[T],
    grad: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = normalized.dims4().expect("rank-4");
    let plane = h * w;
    let count = T::from_f64((n * plane) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dbeta[ch] = dbeta[ch] + grad.data()[i];
                dgamma[ch] = dgamma[ch] + grad.data()[i] * normalized.data()[i];
            }
        }
    }
    let mut dx = Tensor::zeros(normalized.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let k = gamma[ch] * inv_std[ch] / count;
            for i in off..off + plane {
                let g = grad.data()[i];
                dx.data_mut()[i] = k * (count * g - dbeta[ch] - normalized.data()[i] * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Element>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if factor == 0 {
        return Err(Error::invalid("upsample", "factor must be >= 1"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for p in 0..n * c {
        for y in 0..oh {
            for x in 0..ow {
                out.data_mut()[(p * oh + y) * ow + x] =
                    input.data()[(p * h + y / factor) * w + x / factor];
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest_backward<T: Element>(grad: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (n, c, oh, ow) = grad.dims4().expect("rank-4");
    let (h, w) = (oh / factor, ow / factor);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for p in 0..n * c {
        for y in 0..oh {
            for x in 0..ow {
                let i = (p * h + y / factor) * w + x / factor;
                out.data_mut()[i] = out.data()[i] + grad.data()[(p * oh + y) * ow + x];
            }
        }
    }
    out
}

/// Softmax over the channel axis of an NCHW tensor (independently per pixel).
pub fn softmax_channels<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let plane = h * w;
    let mut out = input.clone();
    for b in 0..n {
        for p in 0..plane {
            let at = |ch: usize| (b * c + ch) * plane + p;
            let m = (0..c)
                .map(|ch| input.data()[at(ch)])
                .fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for ch in 0..c {
                let e = (input.data()[at(ch)] - m).exp();
                out.data_mut()[at(ch)] = e;
                z = z + e;
            }
            for ch in 0..c {
                out.data_mut()[at(ch)] = out.data()[at(ch)] / z;
            }
        }
    }
    Ok(out)
}

pub fn softmax_channels_backward<T: Element>(output: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = output.dims4().expect("rank-4");
    let plane = h * w;
    let mut dx = Tensor::zeros(output.shape());
    for b in 0..n {
        for p in 0..plane {
            let at = |ch: usize| (b * c + ch) * plane + p;
            let dot: T = (0..c)
                .map(|ch| output.data()[at(ch)] * grad.data()[at(ch)])
                .sum();
            for ch in 0..c {
                dx.data_mut()[at(ch)] = output.data()[at(ch)] * (grad.data()[at(ch)] - dot);
            }
        }
    }
    dx
}
