use alloc::vec;
use alloc::vec::Vec;

use super::conv_output_extent;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn dims(shape: &[usize], kernel: usize, stride: usize) -> (usize, usize, usize, usize, usize, usize) {
    let &[n, c, h, w] = shape else { unreachable!("pool input is NCHW") };
    let ho = conv_output_extent(h, kernel, stride, 0).unwrap();
    let wo = conv_output_extent(w, kernel, stride, 0).unwrap();
    (n, c, h, w, ho, wo)
}

/// Max pooling; the cached index is the first maximum in row-major window order.
pub(super) fn max_forward<T: Scalar>(x: &Tensor<T>, kernel: usize, stride: usize) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w, ho, wo) = dims(x.shape(), kernel, stride);
    let mut out = vec![T::zero(); n * c * ho * wo];
    let mut argmax = vec![0u32; out.len()];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (oy * stride) * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = (oy * stride + ky) * w + ox * stride + kx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                out[o] = src[best];
                argmax[o] = (plane * h * w + best) as u32;
            }
        }
    }
    (Tensor::new([n, c, ho, wo], out).unwrap(), argmax)
}

pub(super) fn max_backward<T: Scalar>(shape: &[usize], argmax: &[u32], grad: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(shape.to_vec());
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad.data()) {
        d[i as usize] += g;
    }
    dx
}

pub(super) fn avg_forward<T: Scalar>(x: &Tensor<T>, kernel: usize, stride: usize) -> Tensor<T> {
    let (n, c, h, w, ho, wo) = dims(x.shape(), kernel, stride);
    let area = T::from_usize(kernel * kernel);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        acc += src[(oy * stride + ky) * w + ox * stride + kx];
                    }
                }
                out[(plane * ho + oy) * wo + ox] = acc / area;
            }
        }
    }
    Tensor::new([n, c, ho, wo], out).unwrap()
}

pub(super) fn avg_backward<T: Scalar>(shape: &[usize], kernel: usize, stride: usize, grad: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w, ho, wo) = dims(shape, kernel, stride);
    let area = T::from_usize(kernel * kernel);
    let mut dx = Tensor::zeros(shape.to_vec());
    let d = dx.data_mut();
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = grad.data()[(plane * ho + oy) * wo + ox] / area;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        d[plane * h * w + (oy * stride + ky) * w + ox * stride + kx] += g;
                    }
                }
            }
        }
    }
    dx
}
