//! Reverse-mode differentiation over a linear tape of tensor ops.
//!
//! A [`Tape`] owns every recorded value. Ops append a node holding the output
//! and a closure mapping the output gradient to input gradients; `backward`
//! replays the nodes in reverse. Leaves created with `requires_grad` collect
//! gradients; everything else is treated as a constant.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{self, Activation, BatchNormRefs, ConvSpec, Element, Tensor};

static NEXT_TAPE: AtomicUsize = AtomicUsize::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

type BackwardFn<T> =
    Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Tape<T: Element = f32> {
    id: usize,
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    tape: usize,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index).and_then(Option::take)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Autograd(format!(
                "{v:?} is not recorded on this tape"
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], backward: BackwardFn<T>) -> Result<Var> {
        let idx: Vec<usize> = inputs
            .iter()
            .map(|&v| self.index(v))
            .collect::<Result<_>>()?;
        let requires_grad = idx.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: idx,
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// A trainable leaf: gradients are accumulated for it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.insert_leaf(value, true)
    }

    /// A constant input: no gradient is tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.insert_leaf(value, false)
    }

    fn insert_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: vec![],
            backward: None,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.index(v).expect("var from this tape")].value
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        let y = tensor::conv2d(
            self.value(x),
            &spec,
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let spec_b = ConvSpec {
            bias: bias.is_some(),
            ..spec
        };
        self.push(
            y,
            &inputs,
            Box::new(move |ins, _, g| {
                let grads = tensor::conv2d_backward(ins[0], &spec_b, ins[1], g)?;
                let mut out = vec![Some(grads.input), Some(grads.weight)];
                if spec_b.bias {
                    out.push(grads.bias);
                }
                Ok(out)
            }),
        )
    }

    pub fn maxpool2d(
        &mut self,
        x: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (y, indices) = tensor::maxpool2d_with_indices(self.value(x), kernel, stride, padding)?;
        let shape = self.value(x).shape().to_vec();
        self.push(
            y,
            &[x],
            Box::new(move |_, _, g| {
                Ok(vec![Some(tensor::maxpool2d_backward(&shape, &indices, g))])
            }),
        )
    }

    pub fn pad2d(&mut self, x: Var, pads: [usize; 4], value: f64) -> Result<Var> {
        let y = tensor::pad2d(self.value(x), pads, T::from_f64(value))?;
        self.push(
            y,
            &[x],
            Box::new(move |_, _, g| Ok(vec![Some(tensor::pad2d_backward(g, pads)?)])),
        )
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let widths: Vec<usize> = vals.iter().map(|t| t.shape()[1]).collect();
        let y = tensor::concat_channels(&vals)?;
        self.push(
            y,
            xs,
            Box::new(move |_, _, g| {
                Ok(tensor::split_channels(g, &widths)?
                    .into_iter()
                    .map(Some)
                    .collect())
            }),
        )
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = tensor::slice_channels(self.value(x), start, len)?;
        let shape = self.value(x).shape().to_vec();
        self.push(
            y,
            &[x],
            Box::new(move |_, _, g| Ok(vec![Some(tensor::unslice_channels(g, &shape, start))])),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::add(self.value(a), self.value(b))?;
        self.push(
            y,
            &[a, b],
            Box::new(|_, _, g| Ok(vec![Some(g.clone()), Some(g.clone())])),
        )
    }

    /// Elementwise product of two same-shaped values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&p, &q)| p * q)
            .collect();
        let y = Tensor::new(va.shape().to_vec(), data)?;
        self.push(
            y,
            &[a, b],
            Box::new(|ins, _, g| {
                let prod = |t: &Tensor<T>| {
                    let d = t
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&p, &q)| p * q)
                        .collect();
                    Tensor::new(t.shape().to_vec(), d)
                };
                Ok(vec![Some(prod(ins[1])?), Some(prod(ins[0])?)])
            }),
        )
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        let y = tensor::activate(self.value(x), act);
        self.push(
            y,
            &[x],
            Box::new(move |ins, out, g| {
                Ok(vec![Some(tensor::activate_backward(ins[0], out, g, act))])
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Inference-form batch-norm: running statistics are constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let bn = BatchNormRefs {
            gamma: self.value(gamma).data(),
            beta: self.value(beta).data(),
            running_mean,
            running_var,
            eps,
        };
        let y = tensor::batch_norm_inference(self.value(x), &bn)?;
        let eps_t = T::from_f64(eps);
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps_t).sqrt())
            .collect();
        let mean = running_mean.to_vec();
        self.push(
            y,
            &[x, gamma, beta],
            Box::new(move |ins, _, g| {
                let (_, c, h, w) = g.dims4()?;
                let plane = h * w;
                let gam = ins[1].data();
                let mut dx = g.clone();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (i, chunk) in dx.data_mut().chunks_mut(plane.max(1)).enumerate() {
                    let ch = i % c;
                    let xs = &ins[0].data()[i * plane..(i + 1) * plane];
                    for (v, &xv) in chunk.iter_mut().zip(xs) {
                        dbeta[ch] = dbeta[ch] + *v;
                        dgamma[ch] = dgamma[ch] + *v * (xv - mean[ch]) * inv_std[ch];
                        *v = *v * gam[ch] * inv_std[ch];
                    }
                }
                Ok(vec![
                    Some(dx),
                    Some(Tensor::new(vec![c], dgamma)?),
                    Some(Tensor::new(vec![c], dbeta)?),
                ])
            }),
        )
    }

    /// Training-form batch-norm. Returns the output and the biased batch
    /// `(mean, variance)` so the caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let res = tensor::batch_norm_train(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        let normalized = res.normalized;
        let inv_std = res.inv_std;
        let v = self.push(
            res.output,
            &[x, gamma, beta],
            Box::new(move |ins, _, g| {
                let (dx, dgamma, dbeta) =
                    tensor::batch_norm_train_backward(&normalized, &inv_std, ins[1].data(), g);
                let c = dgamma.len();
                Ok(vec![
                    Some(dx),
                    Some(Tensor::new(vec![c], dgamma)?),
                    Some(Tensor::new(vec![c], dbeta)?),
                ])
            }),
        )?;
        Ok((v, res.batch_mean, res.batch_var))
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = tensor::upsample_nearest(self.value(x), factor)?;
        self.push(
            y,
            &[x],
            Box::new(move |_, _, g| Ok(vec![Some(tensor::upsample_nearest_backward(g, factor))])),
        )
    }

    /// Softmax over the channel axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let y = tensor::softmax_channels(self.value(x))?;
        self.push(
            y,
            &[x],
            Box::new(|_, out, g| Ok(vec![Some(tensor::softmax_channels_backward(out, g))])),
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        let y = self.value(x).map(|v| v * f);
        self.push(
            y,
            &[x],
            Box::new(move |_, _, g| Ok(vec![Some(g.map(|v| v * f))])),
        )
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let y = Tensor::scalar(self.value(x).sum());
        self.push(
            y,
            &[x],
            Box::new(move |_, _, g| Ok(vec![Some(Tensor::full(&shape, g.data()[0]))])),
        )
    }

    /// Scalar node whose value and local gradients were computed outside the
    /// tape. `local_grads[i]` is `∂value/∂inputs[i]`.
    pub fn custom_scalar(
        &mut self,
        inputs: &[Var],
        value: T,
        local_grads: Vec<Tensor<T>>,
    ) -> Result<Var> {
        if local_grads.len() != inputs.len() {
            return Err(Error::Autograd(
                "one local gradient per input required".into(),
            ));
        }
        for (&v, lg) in inputs.iter().zip(&local_grads) {
            if self.value(v).shape() != lg.shape() {
                return Err(Error::shape(
                    "custom_scalar",
                    format!(
                        "gradient {:?} vs value {:?}",
                        lg.shape(),
                        self.value(v).shape()
                    ),
                ));
            }
        }
        self.push(
            Tensor::scalar(value),
            inputs,
            Box::new(move |_, _, g| {
                let s = g.data()[0];
                Ok(local_grads.iter().map(|t| Some(t.map(|v| v * s))).collect())
            }),
        )
    }

    /// Back-propagates from a scalar output to every trainable leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let root = self.index(output)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Autograd(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::full(self.nodes[root].value.shape(), T::one()));
        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            let Some(f) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let input_grads = f(&ins, &node.value, &g)?;
            for (&j, ig) in node.inputs.iter().zip(input_grads) {
                let (Some(ig), true) = (ig, self.nodes[j].requires_grad) else {
                    continue;
                };
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
            // keep gradients of leaves only; interior ones were consumed
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.inputs.is_empty() || !node.requires_grad {
                grads[i] = None;
            }
        }
        if !self.nodes[root].requires_grad {
            return Err(Error::Autograd(
                "output does not depend on any trainable leaf".into(),
            ));
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_identity_has_unit_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64));
        let y = t.activation(x, Activation::Identity).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn relu_at_zero_passes_no_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = t.relu(x).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_vars() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(t.backward(x).is_err());
        let mut other = Tape::<f64>::new();
        let y = other.leaf(Tensor::scalar(1.0));
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::full(&[1, 1, 1, 2], 2.0));
        let b = t.constant(Tensor::full(&[1, 1, 1, 2], 3.0));
        let p = t.mul(a, b).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), [3.0, 3.0]);
        assert!(g.get(b).is_none());
    }
}
