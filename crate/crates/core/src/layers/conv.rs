use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unrolls one `[C, H, W]` image into a `[C*k*k, Ho*Wo]` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    img: &[T],
    channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    cols: &mut [T],
) {
    let ho = conv_output_extent(h, kernel, stride, padding).unwrap();
    let wo = conv_output_extent(w, kernel, stride, padding).unwrap();
    let p = ho * wo;
    for c in 0..channels {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let out = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let dst = &mut out[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
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

/// Adjoint of [`im2col`]: accumulates columns back into an image.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    cols: &[T],
    channels: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    img: &mut [T],
) {
    let ho = conv_output_extent(h, kernel, stride, padding).unwrap();
    let wo = conv_output_extent(w, kernel, stride, padding).unwrap();
    let p = ho * wo;
    for c in 0..channels {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output and the per-sample column matrices (kept for backward).
pub(super) fn forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> (Tensor<T>, Vec<T>) {
    let &[n, c, h, w] = x.shape() else {
        unreachable!("conv input is validated as NCHW by the graph")
    };
    let ho = conv_output_extent(h, kernel, stride, padding).unwrap();
    let wo = conv_output_extent(w, kernel, stride, padding).unwrap();
    let p = ho * wo;
    let ckk = c * kernel * kernel;
    let mut cols = vec![T::zero(); n * ckk * p];
    let mut out = vec![T::zero(); n * out_channels * p];
    for s in 0..n {
        let col = &mut cols[s * ckk * p..(s + 1) * ckk * p];
        im2col(&x.data()[s * c * h * w..(s + 1) * c * h * w], c, h, w, kernel, stride, padding, col);
        let y = &mut out[s * out_channels * p..(s + 1) * out_channels * p];
        if let Some(b) = bias {
            for (o, row) in y.chunks_mut(p).enumerate() {
                row.fill(b.data()[o]);
            }
        }
        T::gemm(
            out_channels,
            ckk,
            p,
            T::one(),
            weight.data(),
            ckk,
            1,
            col,
            p,
            1,
            if bias.is_some() { T::one() } else { T::zero() },
            y,
            p,
            1,
        );
    }
    (Tensor::new([n, out_channels, ho, wo], out).unwrap(), cols)
}

#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub(super) fn backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    cols: &[T],
    grad: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
    need_input_grad: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Option<Tensor<T>>) {
    let &[n, c, h, w] = x.shape() else { unreachable!() };
    let &[_, o, ho, wo] = grad.shape() else { unreachable!() };
    let p = ho * wo;
    let ckk = c * kernel * kernel;
    let mut dw = Tensor::zeros(weight.shape().to_vec());
    let mut db = has_bias.then(|| Tensor::<T>::zeros([o]));
    let mut dx = need_input_grad.then(|| Tensor::<T>::zeros(x.shape().to_vec()));
    let mut dcol = vec![T::zero(); if need_input_grad { ckk * p } else { 0 }];
    for s in 0..n {
        let g = &grad.data()[s * o * p..(s + 1) * o * p];
        let col = &cols[s * ckk * p..(s + 1) * ckk * p];
        // dW += dY [o, p] * col^T [p, ckk]
        T::gemm(o, p, ckk, T::one(), g, p, 1, col, 1, p, T::one(), dw.data_mut(), ckk, 1);
        if let Some(db) = db.as_mut() {
            for (bo, row) in db.data_mut().iter_mut().zip(g.chunks(p)) {
                *bo += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dcol = W^T [ckk, o] * dY [o, p]
            T::gemm(ckk, o, p, T::one(), weight.data(), 1, ckk, g, p, 1, T::zero(), &mut dcol, p, 1);
            col2im(
                &dcol,
                c,
                h,
                w,
                kernel,
                stride,
                padding,
                &mut dx.data_mut()[s * c * h * w..(s + 1) * c * h * w],
            );
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w, k, s, pad) = (2usize, 4usize, 5usize, 3usize, 2usize, 1usize);
        let ho = conv_output_extent(h, k, s, pad).unwrap();
        let wo = conv_output_extent(w, k, s, pad).unwrap();
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..c * k * k * ho * wo).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, h, w, k, s, pad, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, k, s, pad, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn direct_convolution_agrees() {
        let (c, h, w, o, k) = (2usize, 4usize, 4usize, 3usize, 3usize);
        let x = Tensor::<f64>::new(
            [1, c, h, w],
            (0..c * h * w).map(|i| ((i * 7 % 11) as f64) - 5.0).collect(),
        )
        .unwrap();
        let wt = Tensor::<f64>::new(
            [o, c, k, k],
            (0..o * c * k * k).map(|i| ((i * 5 % 13) as f64) * 0.25 - 1.5).collect(),
        )
        .unwrap();
        let (y, _) = forward(&x, &wt, None, o, k, 1, 1);
        for oc in 0..o {
            for oy in 0..h {
                for ox in 0..w {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += x.data()[(ic * h + iy as usize) * w + ix as usize]
                                        * wt.data()[((oc * c + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    assert_eq!(y.data()[(oc * h + oy) * w + ox], acc);
                }
            }
        }
    }
}
