use super::{Element, Tensor};
use crate::error::{Error, Result};

fn pooled_extent(len: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::invalid(
            "maxpool2d",
            "kernel and stride must be >= 1",
        ));
    }
    if padding >= kernel {
        return Err(Error::invalid(
            "maxpool2d",
            format!("padding {padding} must be smaller than kernel {kernel}"),
        ));
    }
    let padded = len + 2 * padding;
    if padded < kernel {
        return Err(Error::shape(
            "maxpool2d",
            format!("window {kernel} larger than padded input extent {padded}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Max pooling; padded cells never win (treated as −∞).
pub fn maxpool2d<T: Element>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    maxpool2d_with_indices(input, kernel, stride, padding).map(|(y, _)| y)
}

/// Max pooling that also returns, per output cell, the flat input index of the
/// winning element (first maximum in window scan order).
pub fn maxpool2d_with_indices<T: Element>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    let oh = pooled_extent(h, kernel, stride, padding)?;
    let ow = pooled_extent(w, kernel, stride, padding)?;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut idx = vec![0usize; n * c * oh * ow];
    let x = input.data();
    let pad = padding as isize;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                out.data_mut()[o] = best;
                idx[o] = best_i;
            }
        }
    }
    Ok((out, idx))
}

/// Routes each output gradient to the input element that won its window.
pub fn maxpool2d_backward<T: Element>(
    input_shape: &[usize],
    indices: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    for (&i, &g) in indices.iter().zip(grad_out.data()) {
        if i != usize::MAX {
            dx.data_mut()[i] = dx.data()[i] + g;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_window_picks_max() {
        let x = Tensor::<f64>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = maxpool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), [4.0]);
    }

    #[test]
    fn constant_input_stays_constant() {
        let x = Tensor::<f32>::full(&[1, 2, 5, 5], -3.5);
        let y = maxpool2d(&x, 3, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == -3.5));
    }

    #[test]
    fn same_padding_preserves_shape() {
        let x = Tensor::<f32>::zeros(&[1, 8, 20, 20]);
        assert_eq!(maxpool2d(&x, 5, 1, 2).unwrap().shape(), [1, 8, 20, 20]);
    }

    #[test]
    fn negative_values_ignore_padding() {
        let x = Tensor::<f32>::full(&[1, 1, 1, 1], -7.0);
        assert_eq!(maxpool2d(&x, 3, 1, 1).unwrap().data(), [-7.0]);
    }

    #[test]
    fn oversized_window_is_an_error() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert!(maxpool2d(&x, 5, 1, 1).is_err());
        assert!(maxpool2d(&x, 2, 1, 2).is_err());
    }
}
