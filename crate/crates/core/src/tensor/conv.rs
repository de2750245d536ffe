use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Square-kernel 2-D convolution hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride-1 convolution with "same" padding and no bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            bias: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    /// Depthwise `k×k` convolution over `channels`.
    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        Self::new(channels, channels, kernel).groups(channels)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |d: String| Err(Error::invalid("conv spec", d));
        if self.groups == 0 || self.kernel == 0 || self.stride == 0 {
            return err(format!("groups, kernel and stride must be >= 1: {self:?}"));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return err(format!(
                "channels {}->{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            ));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }

    /// Output spatial extents for an `h×w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel || pw < self.kernel {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {} larger than padded input {ph}x{pw}", self.kernel),
            ));
        }
        Ok((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels && self.groups > 1
    }
}

pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    cg: usize,
    ng: usize,
}

fn check<T: Element>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Geometry> {
    spec.validate()?;
    let (n, c, h, w) = input.dims4()?;
    if c != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input channels {c} != spec in_channels {}",
                spec.in_channels
            ),
        ));
    }
    if weight.shape() != spec.weight_shape() {
        return Err(Error::shape(
            "conv2d",
            format!(
                "weight extents {:?} != expected (n, c/groups, k, k) {:?}",
                weight.shape(),
                spec.weight_shape()
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(Error::shape(
                "conv2d",
                format!("bias extents {:?} != [{}]", b.shape(), spec.out_channels),
            ));
        }
    }
    let (oh, ow) = spec.output_hw(h, w)?;
    Ok(Geometry {
        n,
        h,
        w,
        oh,
        ow,
        cg: c / spec.groups,
        ng: spec.out_channels / spec.groups,
    })
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x: &[T],
    cg: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let p = oh * ow;
    for c in 0..cg {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let seg = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in seg.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(
    cols: &[T],
    cg: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let p = oh * ow;
    for c in 0..cg {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-D convolution (im2col + GEMM; direct loops for depthwise).
///
/// Output extents are `(N, n, h', w')` with `h' = (h + 2·pad − k)/stride + 1`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let g = check(input, spec, weight, bias)?;
    let k = spec.kernel;
    let (p, kk) = (g.oh * g.ow, g.cg * k * k);
    let mut out = Tensor::zeros(&[g.n, spec.out_channels, g.oh, g.ow]);
    if spec.is_depthwise() {
        depthwise_forward(input.data(), spec, weight.data(), &g, out.data_mut());
    } else {
        let mut cols = if spec.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); kk * p]
        };
        let in_plane = spec.in_channels * g.h * g.w;
        for b in 0..g.n {
            for grp in 0..spec.groups {
                let x = &input.data()[b * in_plane + grp * g.cg * g.h * g.w..][..g.cg * g.h * g.w];
                let wmat = &weight.data()[grp * g.ng * kk..(grp + 1) * g.ng * kk];
                let ystart = (b * spec.out_channels + grp * g.ng) * p;
                let y = &mut out.data_mut()[ystart..ystart + g.ng * p];
                if spec.is_pointwise() {
                    T::gemm(g.ng, kk, p, wmat, false, x, false, T::zero(), y);
                } else {
                    im2col(
                        x,
                        g.cg,
                        g.h,
                        g.w,
                        k,
                        spec.stride,
                        spec.padding,
                        g.oh,
                        g.ow,
                        &mut cols,
                    );
                    T::gemm(g.ng, kk, p, wmat, false, &cols, false, T::zero(), y);
                }
            }
        }
    }
    if let (Some(bias), true) = (bias, p > 0) {
        let nch = spec.out_channels;
        for (i, plane) in out.data_mut().chunks_mut(p).enumerate() {
            let bv = bias.data()[i % nch];
            for v in plane {
                *v = *v + bv;
            }
        }
    }
    Ok(out)
}

fn depthwise_forward<T: Element>(x: &[T], spec: &ConvSpec, w: &[T], g: &Geometry, y: &mut [T]) {
    let (k, s, pad) = (spec.kernel, spec.stride, spec.padding as isize);
    let c = spec.in_channels;
    for b in 0..g.n {
        for ch in 0..c {
            let plane = &x[(b * c + ch) * g.h * g.w..][..g.h * g.w];
            let kw = &w[ch * k * k..(ch + 1) * k * k];
            let out = &mut y[(b * c + ch) * g.oh * g.ow..][..g.oh * g.ow];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row = &plane[iy as usize * g.w..][..g.w];
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - pad;
                            if ix >= 0 && ix < g.w as isize {
                                acc = acc + row[ix as usize] * kw[ky * k + kx];
                            }
                        }
                    }
                    out[oy * g.ow + ox] = acc;
                }
            }
        }
    }
}

fn depthwise_backward<T: Element>(
    x: &[T],
    spec: &ConvSpec,
    w: &[T],
    g: &Geometry,
    dy: &[T],
    dx: &mut [T],
    dw: &mut [T],
) {
    let (k, s, pad) = (spec.kernel, spec.stride, spec.padding as isize);
    let c = spec.in_channels;
    for b in 0..g.n {
        for ch in 0..c {
            let base = (b * c + ch) * g.h * g.w;
            let plane = &x[base..base + g.h * g.w];
            let dplane = &mut dx[base..base + g.h * g.w];
            let kw = &w[ch * k * k..(ch + 1) * k * k];
            let dkw = &mut dw[ch * k * k..(ch + 1) * k * k];
            let go = &dy[(b * c + ch) * g.oh * g.ow..][..g.oh * g.ow];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let gv = go[oy * g.ow + ox];
                    if gv == T::zero() {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - pad;
                            if ix >= 0 && ix < g.w as isize {
                                let idx = iy as usize * g.w + ix as usize;
                                dkw[ky * k + kx] = dkw[ky * k + kx] + gv * plane[idx];
                                dplane[idx] = dplane[idx] + gv * kw[ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv2d`] with respect to input, weight and (if present) bias.
pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = check(input, spec, weight, None)?;
    if grad_out.shape() != [g.n, spec.out_channels, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad_out extents {:?}", grad_out.shape()),
        ));
    }
    let k = spec.kernel;
    let (p, kk) = (g.oh * g.ow, g.cg * k * k);
    let mut dx = Tensor::zeros(input.shape());
    let mut dw = Tensor::zeros(weight.shape());
    if spec.is_depthwise() {
        depthwise_backward(
            input.data(),
            spec,
            weight.data(),
            &g,
            grad_out.data(),
            dx.data_mut(),
            dw.data_mut(),
        );
    } else {
        let pointwise = spec.is_pointwise();
        let mut cols = vec![T::zero(); if pointwise { 0 } else { kk * p }];
        let mut dcols = vec![T::zero(); kk * p];
        let in_plane = spec.in_channels * g.h * g.w;
        let gsz = g.cg * g.h * g.w;
        for b in 0..g.n {
            for grp in 0..spec.groups {
                let xoff = b * in_plane + grp * gsz;
                let x = &input.data()[xoff..xoff + gsz];
                let wmat = &weight.data()[grp * g.ng * kk..(grp + 1) * g.ng * kk];
                let dy = &grad_out.data()[(b * spec.out_channels + grp * g.ng) * p..][..g.ng * p];
                let dwm = &mut dw.data_mut()[grp * g.ng * kk..(grp + 1) * g.ng * kk];
                let colsref: &[T] = if pointwise {
                    x
                } else {
                    im2col(
                        x,
                        g.cg,
                        g.h,
                        g.w,
                        k,
                        spec.stride,
                        spec.padding,
                        g.oh,
                        g.ow,
                        &mut cols,
                    );
                    &cols
                };
                // dW += dY · colsᵀ
                T::gemm(g.ng, p, kk, dy, false, colsref, true, T::one(), dwm);
                let dxs = &mut dx.data_mut()[xoff..xoff + gsz];
                if pointwise {
                    // dX = Wᵀ · dY directly
                    T::gemm(kk, g.ng, p, wmat, true, dy, false, T::zero(), dxs);
                } else {
                    T::gemm(kk, g.ng, p, wmat, true, dy, false, T::zero(), &mut dcols);
                    col2im(
                        &dcols,
                        g.cg,
                        g.h,
                        g.w,
                        k,
                        spec.stride,
                        spec.padding,
                        g.oh,
                        g.ow,
                        dxs,
                    );
                }
            }
        }
    }
    let bias = spec.bias.then(|| {
        let mut db = Tensor::zeros(&[spec.out_channels]);
        for (i, plane) in grad_out
            .data()
            .chunks(p.max(1))
            .enumerate()
            .filter(|_| p > 0)
        {
            let c = i % spec.out_channels;
            db.data_mut()[c] = db.data()[c] + plane.iter().copied().sum::<T>();
        }
        db
    });
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_copies_input() {
        let x = Tensor::<f32>::from_fn(&[1, 1, 3, 3], |i| i as f32);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        let spec = ConvSpec::new(1, 1, 1).with_bias(true);
        assert_eq!(conv2d(&x, &spec, &w, Some(&b)).unwrap(), x);
    }

    #[test]
    fn same_padding_shape() {
        let x = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
        let spec = ConvSpec::new(3, 4, 3);
        let w = Tensor::zeros(&spec.weight_shape());
        assert_eq!(conv2d(&x, &spec, &w, None).unwrap().shape(), [1, 4, 8, 8]);
    }

    #[test]
    fn mismatched_channels_name_the_dimension() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let spec = ConvSpec::new(3, 4, 3);
        let w = Tensor::zeros(&spec.weight_shape());
        let err = conv2d(&x, &spec, &w, None).unwrap_err().to_string();
        assert!(err.contains("input channels 2"), "{err}");
        let bad_w = Tensor::zeros(&[4, 3, 1, 1]);
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let err = conv2d(&x, &spec, &bad_w, None).unwrap_err().to_string();
        assert!(err.contains("weight extents"), "{err}");
    }

    #[test]
    fn stride_two_output_extent() {
        let spec = ConvSpec::new(3, 8, 3).stride(2);
        assert_eq!(spec.output_hw(640, 640).unwrap(), (320, 320));
        assert_eq!(spec.output_hw(7, 5).unwrap(), (4, 3));
    }

    #[test]
    fn invalid_groups_rejected() {
        assert!(ConvSpec::new(6, 4, 3).groups(4).validate().is_err());
        assert!(ConvSpec::new(6, 4, 0).validate().is_err());
    }
}
